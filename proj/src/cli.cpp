#include "longsim/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "longsim/hash.hpp"
#include "longsim/metrics.hpp"
#include "longsim/rollout.hpp"
#include "longsim/synthetic.hpp"
#include "longsim/tokenizer.hpp"
#include "longsim/training.hpp"

namespace longsim {

namespace fs = std::filesystem;

int effective_jobs(int requested) {
  if (const char* env = std::getenv("LONGSIM_JOBS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw std::invalid_argument(std::string("LONGSIM_JOBS must be a positive integer, got '") + env + "'");
  }
  return std::max(1, requested);
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return std::string(std::strcmp(buf, "-0.00") == 0 ? "0.00" : buf);
}

}  // namespace

std::string render_svg(const Rollout& r, int step) {
  const Scenario& sc = r.scene;
  if (step < 0 || step >= sc.n_steps) {
    throw std::out_of_range("step " + std::to_string(step) + " outside [0, " + std::to_string(sc.n_steps) + ")");
  }
  constexpr double kSpan = 160.0;  // meters shown
  constexpr double kScale = 4.0;   // pixels per meter
  const auto& ego = sc.ego().states[static_cast<std::size_t>(step)];
  Vec2 center{ego.x, ego.y};
  if (!ego.valid) {
    for (const auto& pl : sc.map) {
      if (!pl.points.empty()) {
        center = pl.points.front();
        break;
      }
    }
  }
  const double px = kSpan * kScale;
  auto X = [&](double x) { return fmt((x - center.x + kSpan / 2) * kScale); };
  auto Y = [&](double y) { return fmt((center.y - y + kSpan / 2) * kScale); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(px) << "\" height=\"" << fmt(px)
     << "\" viewBox=\"0 0 " << fmt(px) << ' ' << fmt(px) << "\">\n";
  os << "<title>step " << step << "</title>\n";
  os << "<style>"
        ".map{fill:none;stroke-width:1}.lane_center{stroke:#bbbbbb}.road_edge{stroke:#444444}"
        ".crosswalk{stroke:#88aaff}.stop_line{stroke:#ff8888}.other{stroke:#dddddd}"
        ".agent{stroke:#000000;stroke-width:0.5}.ego{fill:#d62728}.initial{fill:#1f77b4}.inserted{fill:#2ca02c}"
        "</style>\n";
  os << "<rect width=\"" << fmt(px) << "\" height=\"" << fmt(px) << "\" fill=\"#ffffff\"/>\n";
  for (const auto& pl : sc.map) {
    os << "<polyline class=\"map " << to_string(pl.kind) << "\" points=\"";
    for (std::size_t i = 0; i < pl.points.size(); ++i) {
      if (i) os << ' ';
      os << X(pl.points[i].x) << ',' << Y(pl.points[i].y);
    }
    os << "\"/>\n";
  }
  for (std::size_t i = 0; i < sc.agents.size(); ++i) {
    const auto& a = sc.agents[i];
    const auto& s = a.states[static_cast<std::size_t>(step)];
    if (!s.valid) continue;
    const double c = std::cos(s.heading), sn = std::sin(s.heading);
    const double hl = a.shape.length / 2, hw = a.shape.width / 2;
    os << "<polygon class=\"agent " << to_string(r.origin[i]) << "\" data-id=\"" << a.id << "\" points=\"";
    const double corners[4][2] = {{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}};
    for (int k = 0; k < 4; ++k) {
      if (k) os << ' ';
      const double x = s.x + c * corners[k][0] - sn * corners[k][1];
      const double y = s.y + sn * corners[k][0] + c * corners[k][1];
      os << X(x) << ',' << Y(y);
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

/// Writes the resolved options of `sub` next to a file output or into a directory output.
void echo_config(const CLI::App* sub, const fs::path& out, bool out_is_dir) {
  std::istringstream all(sub->get_parent()->config_to_str(true, false));
  const std::string prefix = sub->get_name() + ".";
  std::string text, line;
  while (std::getline(all, line)) {
    if (line.rfind(prefix, 0) == 0) text += line + '\n';
  }
  const fs::path target = out_is_dir ? out / "run_config.toml" : fs::path(out.string() + ".config.toml");
  write_file(target, text);
}

struct SynthArgs {
  int count = 20;
  std::uint64_t seed = 0;
  std::string out;
  double through_rate = 0.5;
  int min_agents = 8;
  int max_agents = 12;
};

struct VocabArgs {
  std::string corpus, out;
  int size = 2048;
  int k = 32;
  std::uint64_t seed = 0;
};

struct TokenizeArgs {
  std::string corpus, vocab, out;
};

struct TrainArgs {
  std::string corpus, vocab, out, model_config, train_config;
  bool tiny = false;
  std::uint64_t seed = 0;
  int epochs = -1;
  double lr = -1;
  int batch_size = -1;
  int checkpoint_every = -1;
  int jobs = 1;
};

struct RolloutArgs {
  std::string model, vocab, scenario, out;
  int index = 0;
  bool all = false;
  int horizon = 60;
  std::uint64_t seed = 0;
  bool motion_only = false;
  std::string ego = "model";
  int top_k = 10;
  double temperature = 1.0;
  int jobs = 1;
};

struct ReferenceArgs {
  std::string corpus, out;
  int window = 80;
  int stride = 20;
  double count_radius = 60.0;
  double heuristic_radius = 60.0;
  std::vector<double> weights{1, 1, 1, 1};
};

struct EvalArgs {
  std::string rollouts, reference, out;
  bool heuristic = false;
};

struct RenderArgs {
  std::string rollout, out;
  int step = 0;
  bool all = false;
};

int cmd_synth(const SynthArgs& a, const CLI::App* sub) {
  CorpusConfig cc;
  cc.count = a.count;
  cc.through_traffic_rate = a.through_rate;
  cc.min_agents = a.min_agents;
  cc.max_agents = a.max_agents;
  const auto corpus = generate_synthetic_corpus(cc, a.seed);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  write_scenarios(corpus, a.out);
  echo_config(sub, a.out, false);
  std::cout << "wrote " << corpus.size() << " scenarios to " << a.out << '\n';
  return 0;
}

int cmd_vocab(const VocabArgs& a, const CLI::App* sub) {
  const auto corpus = load_scenarios(a.corpus);
  const auto segments = collect_segments(corpus);
  const auto vocab = build_motion_vocabulary(segments, a.size, a.k, a.seed);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_vocabulary(vocab, a.out);
  echo_config(sub, a.out, false);
  std::cout << "vocabulary of " << vocab.size() << " primitives from " << segments.size() << " segments, hash "
            << hex64(vocabulary_hash(vocab)) << '\n';
  return 0;
}

int cmd_tokenize(const TokenizeArgs& a, const CLI::App* sub) {
  const auto corpus = load_scenarios(a.corpus);
  const auto vocab = load_vocabulary(a.vocab);
  std::ostringstream os;
  int skipped = 0;
  for (const auto& sc : corpus) {
    const auto ts = build_gt_sequence(sc, vocab);
    skipped += ts.skipped_out_of_grid;
    os << serialize_tokenized(ts) << '\n';
  }
  write_file(a.out, os.str());
  echo_config(sub, a.out, false);
  std::cout << "tokenized " << corpus.size() << " scenarios; " << skipped << " insertions outside the pose grid skipped\n";
  return 0;
}

int cmd_train(const TrainArgs& a, const CLI::App* sub) {
  const auto corpus = load_scenarios(a.corpus);
  const auto vocab = load_vocabulary(a.vocab);
  ModelConfig mc = a.tiny ? ModelConfig::tiny() : ModelConfig{};
  if (!a.model_config.empty()) {
    mc = ModelConfig::from_text(read_file(a.model_config));
  } else {
    mc.motion_vocab = vocab.size();
  }
  mc.validate();
  if (mc.motion_vocab != vocab.size()) {
    throw HashMismatchError("model config expects " + std::to_string(mc.motion_vocab) + " motion tokens, vocabulary has " +
                            std::to_string(vocab.size()));
  }
  TrainConfig tc;
  if (!a.train_config.empty()) tc = TrainConfig::from_text(read_file(a.train_config));
  if (a.epochs >= 0) tc.epochs = a.epochs;
  if (a.lr > 0) tc.lr = a.lr;
  if (a.batch_size > 0) tc.batch_size = a.batch_size;
  if (a.checkpoint_every >= 0) tc.checkpoint_every = a.checkpoint_every;
  tc.jobs = effective_jobs(a.jobs);

  TokenizeOptions topt;
  topt.grid = mc.grid;
  topt.map_cap = mc.map_cap;
  std::vector<TrainingExample> examples;
  for (const auto& sc : corpus) {
    examples.push_back(build_training_example(build_gt_sequence(sc, vocab, topt), mc, tc.spatial_limit));
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_file(dir / "model_config.txt", mc.to_text());
  write_file(dir / "train_config.txt", tc.to_text());
  write_file(dir / "vocab.json", read_file(a.vocab));
  echo_config(sub, dir, true);

  nn::CheckpointHeader header;
  header.config_hash = mc.hash();
  header.vocab_hash = vocabulary_hash(vocab);
  header.config_text = mc.to_text();

  std::ofstream log(dir / "loss.csv", std::ios::binary);
  write_loss_csv_header(log);
  TrainHooks hooks;
  hooks.on_step = [&](const TrainLogRow& row) { write_loss_csv_row(log, row); };
  hooks.on_checkpoint = [&](int epoch, const nn::ParamSet<float>& params) {
    char name[64];
    std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
    if (epoch == tc.epochs) {
      nn::save_checkpoint(dir / "model.ckpt", params, header);
    } else {
      nn::save_checkpoint(dir / name, params, header);
    }
  };
  const auto params = train(examples, mc, tc, a.seed, hooks);
  if (tc.epochs == 0) nn::save_checkpoint(dir / "model.ckpt", params, header);

  Accuracy acc;
  for (const auto& ex : examples) acc += teacher_forced_accuracy(params, mc, ex);
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "motion " << acc.motion() << '\n'
     << "temporal_control " << acc.temporal_control() << '\n'
     << "spatial_control " << acc.spatial_control() << '\n'
     << "position " << Accuracy::ratio(acc.position_correct, acc.position_total) << '\n'
     << "heading " << Accuracy::ratio(acc.heading_correct, acc.heading_total) << '\n'
     << "type " << Accuracy::ratio(acc.type_correct, acc.type_total) << '\n';
  write_file(dir / "accuracy.txt", os.str());
  std::cout << "trained " << tc.epochs << " epochs on " << examples.size() << " scenarios\n" << os.str();
  return 0;
}

int cmd_rollout(const RolloutArgs& a, const CLI::App* sub) {
  const fs::path vocab_path = a.vocab.empty() ? fs::path(a.model).parent_path() / "vocab.json" : fs::path(a.vocab);
  const auto vocab = load_vocabulary(vocab_path);
  const SimModel model = load_sim_model(a.model, vocab);
  const auto scenarios = load_scenarios(a.scenario);
  RolloutOptions opt;
  opt.horizon = a.horizon;
  opt.motion_only = a.motion_only;
  opt.ego_mode = a.ego == "log" ? EgoMode::log_replay : EgoMode::model_driven;
  opt.policy.position_top_k = a.top_k;
  opt.policy.motion_temperature = a.temperature;

  if (!a.all) {
    if (a.index < 0 || a.index >= static_cast<int>(scenarios.size())) {
      throw std::out_of_range("scenario index " + std::to_string(a.index) + " outside the file");
    }
    opt.seed = a.seed;
    const Rollout r = run_rollout(model, scenarios[static_cast<std::size_t>(a.index)], opt);
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    write_rollout(r, a.out);
    echo_config(sub, a.out, false);
    std::cout << "rollout of " << r.horizon() << " steps, " << r.events.size() << " events\n";
    return 0;
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const int n = static_cast<int>(scenarios.size());
  const int workers = std::min(effective_jobs(a.jobs), std::max(1, n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        RolloutOptions o = opt;
        o.seed = a.seed + static_cast<std::uint64_t>(i);
        char name[64];
        std::snprintf(name, sizeof name, "rollout_%04d.json", i);
        write_rollout(run_rollout(model, scenarios[static_cast<std::size_t>(i)], o), dir / name);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  echo_config(sub, dir, true);
  std::cout << "wrote " << n << " rollouts to " << dir.string() << '\n';
  return 0;
}

int cmd_reference(const ReferenceArgs& a, const CLI::App* sub) {
  MetricsConfig cfg;
  cfg.windows = {a.window, a.stride};
  cfg.count_radius = a.count_radius;
  cfg.heuristic_radius = a.heuristic_radius;
  if (a.weights.size() != 4) throw std::invalid_argument("--weights needs four values");
  std::copy(a.weights.begin(), a.weights.end(), cfg.weights.begin());
  const auto corpus = load_scenarios(a.corpus);
  const auto ref = estimate_reference(corpus, cfg);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_reference(ref, a.out);
  echo_config(sub, a.out, false);
  std::cout << "reference from " << ref.scenarios << " scenarios, " << ref.windows << " windows; count mean "
            << ref.count_mean << " spread " << ref.count_spread << '\n';
  return 0;
}

int cmd_eval(const EvalArgs& a, const CLI::App* sub) {
  const auto ref = load_reference(a.reference);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.rollouts)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::invalid_argument("no rollout files in " + a.rollouts);
  std::vector<Rollout> rollouts;
  for (const auto& f : files) rollouts.push_back(load_rollout(f));
  const MetricsReport rep = evaluate(rollouts, ref, a.heuristic);
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_file(dir / "report.txt", report_text(rep));
  write_file(dir / "report.csv", report_csv(rep));
  echo_config(sub, dir, true);
  std::cout << report_text(rep);
  return 0;
}

int cmd_render(const RenderArgs& a, const CLI::App* sub) {
  const Rollout r = load_rollout(a.rollout);
  if (!a.all) {
    write_file(a.out, render_svg(r, a.step));
    echo_config(sub, a.out, false);
    return 0;
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  for (int s = 0; s < r.scene.n_steps; s += kTokenSpan) {
    char name[64];
    std::snprintf(name, sizeof name, "frame_%04d.svg", s);
    write_file(dir / name, render_svg(r, s));
  }
  echo_config(sub, dir, true);
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Long-horizon traffic simulation with agent insertion and removal"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every sub-command");

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic scenario corpus");
  s_synth->add_option("--count", synth.count, "Scenario count")->capture_default_str();
  s_synth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  s_synth->add_option("--out", synth.out, "Output JSONL path")->required();
  s_synth->add_option("--through-rate", synth.through_rate, "Fraction of through-traffic agents")->capture_default_str();
  s_synth->add_option("--min-agents", synth.min_agents)->capture_default_str();
  s_synth->add_option("--max-agents", synth.max_agents)->capture_default_str();

  VocabArgs vocab;
  auto* s_vocab = app.add_subcommand("vocab", "Build the motion vocabulary");
  s_vocab->add_option("--corpus", vocab.corpus, "Scenario JSONL")->required();
  s_vocab->add_option("--size", vocab.size, "Vocabulary size")->capture_default_str();
  s_vocab->add_option("--k", vocab.k, "Candidates sampled per round")->capture_default_str();
  s_vocab->add_option("--seed", vocab.seed)->capture_default_str();
  s_vocab->add_option("--out", vocab.out, "Output vocabulary JSON")->required();

  TokenizeArgs tok;
  auto* s_tok = app.add_subcommand("tokenize", "Tokenize scenarios into ground-truth sequences");
  s_tok->add_option("--corpus", tok.corpus)->required();
  s_tok->add_option("--vocab", tok.vocab)->required();
  s_tok->add_option("--out", tok.out, "Output JSONL")->required();

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train with teacher forcing");
  s_train->add_option("--corpus", tr.corpus)->required();
  s_train->add_option("--vocab", tr.vocab)->required();
  s_train->add_option("--out", tr.out, "Output directory")->required();
  s_train->add_option("--seed", tr.seed)->capture_default_str();
  s_train->add_option("--model-config", tr.model_config, "Model config file (key = value)");
  s_train->add_flag("--tiny", tr.tiny, "Use the small desk-scale model");
  s_train->add_option("--train-config", tr.train_config, "Training config file (key = value)");
  s_train->add_option("--epochs", tr.epochs, "Override epochs");
  s_train->add_option("--lr", tr.lr, "Override learning rate");
  s_train->add_option("--batch-size", tr.batch_size, "Override batch size");
  s_train->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoints");
  s_train->add_option("--jobs", tr.jobs, "Worker threads (LONGSIM_JOBS overrides)")->capture_default_str();

  RolloutArgs ro;
  ro.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  tr.jobs = ro.jobs;
  auto* s_roll = app.add_subcommand("rollout", "Closed-loop interleaved rollout");
  s_roll->add_option("--model", ro.model, "Checkpoint")->required();
  s_roll->add_option("--vocab", ro.vocab, "Vocabulary (default: vocab.json next to the checkpoint)");
  s_roll->add_option("--scenario", ro.scenario, "Scenario JSONL")->required();
  s_roll->add_option("--index", ro.index, "Scenario index in the file")->capture_default_str();
  s_roll->add_flag("--all", ro.all, "Roll out every scenario; --out is a directory");
  s_roll->add_option("--horizon", ro.horizon, "Token steps after the history")->capture_default_str();
  s_roll->add_option("--seed", ro.seed)->capture_default_str();
  s_roll->add_option("--out", ro.out)->required();
  s_roll->add_flag("--motion-only", ro.motion_only, "Skip every scene phase");
  s_roll->add_option("--ego", ro.ego, "Ego driver")->check(CLI::IsMember({"log", "model"}))->capture_default_str();
  s_roll->add_option("--top-k", ro.top_k, "Position top-K")->capture_default_str();
  s_roll->add_option("--temperature", ro.temperature, "Motion temperature")->capture_default_str();
  s_roll->add_option("--jobs", ro.jobs, "Worker threads (LONGSIM_JOBS overrides)");

  ReferenceArgs ref;
  auto* s_ref = app.add_subcommand("reference", "Estimate reference distributions from a corpus");
  s_ref->add_option("--corpus", ref.corpus)->required();
  s_ref->add_option("--out", ref.out)->required();
  s_ref->add_option("--window", ref.window, "Window length in raw steps")->capture_default_str();
  s_ref->add_option("--stride", ref.stride, "Window stride in raw steps")->capture_default_str();
  s_ref->add_option("--count-radius", ref.count_radius)->capture_default_str();
  s_ref->add_option("--heuristic-radius", ref.heuristic_radius)->capture_default_str();
  s_ref->add_option("--weights", ref.weights, "Composite weights: kinematic interactive map placement")
      ->expected(4)
      ->capture_default_str();

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Score rollouts against a reference");
  s_eval->add_option("--rollouts", ev.rollouts, "Directory of rollout files")->required();
  s_eval->add_option("--reference", ev.reference)->required();
  s_eval->add_option("--out", ev.out, "Report directory")->required();
  s_eval->add_flag("--heuristic", ev.heuristic, "Replace events with the distance-threshold baseline");

  RenderArgs rd;
  auto* s_render = app.add_subcommand("render", "Render rollout frames as SVG");
  s_render->add_option("--rollout", rd.rollout)->required();
  s_render->add_option("--out", rd.out)->required();
  s_render->add_option("--step", rd.step, "Raw step")->capture_default_str();
  s_render->add_flag("--all", rd.all, "Every token boundary; --out is a directory");

  app.set_config("--run-config", "", "Re-run from an echoed config; command-line options override it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*s_synth) return cmd_synth(synth, s_synth);
    if (*s_vocab) return cmd_vocab(vocab, s_vocab);
    if (*s_tok) return cmd_tokenize(tok, s_tok);
    if (*s_train) return cmd_train(tr, s_train);
    if (*s_roll) return cmd_rollout(ro, s_roll);
    if (*s_ref) return cmd_reference(ref, s_ref);
    if (*s_eval) return cmd_eval(ev, s_eval);
    if (*s_render) return cmd_render(rd, s_render);
  } catch (const HashMismatchError& e) {
    std::cerr << "error: hash mismatch: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace longsim
