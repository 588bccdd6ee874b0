#pragma once

#include <string>

#include "longsim/rollout.hpp"

namespace longsim {

/// Entry point of the `longsim` tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

/// One frame of a rollout at raw step `step`: map polylines and agent boxes whose
/// class attribute is their origin (ego, initial, inserted).
std::string render_svg(const Rollout& rollout, int step);

/// Worker count: LONGSIM_JOBS when set, otherwise `requested`, at least 1.
int effective_jobs(int requested);

}  // namespace longsim
