#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ofa/dataset.hpp"
#include "ofa/ofa.hpp"
#include "selftest.hpp"

namespace {

using namespace ofa;

enum Exit { ok = 0, other = 1, config_error = 2, data_error = 3, diverged = 4 };

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::config:
    case ErrorCode::invalid_argument: return config_error;
    case ErrorCode::bad_magic:
    case ErrorCode::truncated:
    case ErrorCode::unsupported_version:
    case ErrorCode::io:
    case ErrorCode::dimension_mismatch: return data_error;
    case ErrorCode::divergence:
    case ErrorCode::non_finite: return diverged;
  }
  return other;
}

// --seed wins, then OFA_SEED.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("OFA_SEED")) {
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::config, std::string("OFA_SEED is not an unsigned integer: '") + env + "'");
  }
  throw Error(ErrorCode::config, "--seed is required (or set OFA_SEED)");
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw Error(ErrorCode::config, "not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

// "a,b,c" or "low:high:count" (count points, both ends included). A point at 2
// becomes the largest usable lambda.
std::vector<double> parse_lambdas(const std::string& text) {
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    const auto parts = split(text, ':');
    if (parts.size() != 3) throw Error(ErrorCode::config, "grid must be low:high:count, got '" + text + "'");
    const double low = parse_double(parts[0]);
    const double high = parse_double(parts[1]);
    const double count = parse_double(parts[2]);
    if (!(count >= 1.0) || count != static_cast<double>(static_cast<std::size_t>(count)) || !(low <= high))
      throw Error(ErrorCode::config, "grid must be low:high:count with low <= high and count >= 1");
    const auto n = static_cast<std::size_t>(count);
    for (std::size_t i = 0; i < n; ++i) out.push_back(n == 1 ? low : low + (high - low) * i / static_cast<double>(n - 1));
  } else {
    for (const auto& p : split(text, ',')) out.push_back(parse_double(p));
  }
  for (double& l : out) {
    if (l == kLambdaLimit) l = kLambdaLimit - kLambdaOpenEps;
    if (!(l >= 0.0 && l < kLambdaLimit)) throw Error(ErrorCode::config, "lambda " + std::to_string(l) + " outside [0, 2]");
  }
  return out;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& p : split(text, ',')) out.push_back(parse_double(p));
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) { detail::write_file(path, text); }

Json load_config(const std::string& path) { return path.empty() ? Json::object() : load_json(path); }

void check_input_dim(const ModelDims& dims, const Corpus& corpus) {
  const std::size_t D = corpus.front().features.frames.cols();
  if (dims.input_dim != D)
    throw Error(ErrorCode::config,
                "dims.input_dim " + std::to_string(dims.input_dim) + " does not match the data feature size " + std::to_string(D));
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string s = "step,lambda,distill,guidance,quantity,total\n";
  for (const auto& r : trace)
    s += std::to_string(r.step) + "," + fmt(r.lambda) + "," + fmt(r.distill) + "," + fmt(r.guidance) + "," +
         fmt(r.quantity) + "," + fmt(r.total) + "\n";
  return s;
}

struct PretrainArgs {
  std::string config, data, out, trace, range;
  std::optional<std::uint64_t> seed;
  double lambda = 0.0;
};

int run_pretrain(const PretrainArgs& a, bool fixed) {
  TrainConfig cfg = train_config_from_json(load_config(a.config));
  if (!a.range.empty()) cfg.range = SampleRange::parse(a.range);
  cfg.seed = resolve_seed(a.seed);
  if (fixed) {
    if (!(a.lambda >= 0.0 && a.lambda < kLambdaLimit)) throw Error(ErrorCode::config, "--lambda must lie in [0, 2)");
    cfg.range = SampleRange::fixed(a.lambda);
  }
  const Corpus corpus = read_dataset(a.data);
  check_input_dim(cfg.dims, corpus);

  Rng root(cfg.seed);
  Rng init(root.fork());
  StudentModel student = StudentModel::initialize(cfg.dims, init);
  TeacherModel teacher = TeacherModel::initialize(cfg.dims, init);
  PretrainResult r = fixed ? fixed_lambda_pretrain(cfg, a.lambda, corpus, std::move(student), teacher)
                           : ofa_pretrain(cfg, corpus, std::move(student), teacher);
  save_checkpoint(a.out, {cfg.dims, std::move(r.student), std::move(teacher), cfg.range, cfg.cif});
  write_text(a.trace.empty() ? a.out + ".trace.csv" : a.trace, trace_csv(r.trace));
  if (!r.trace.empty())
    std::fprintf(stderr, "%zu steps, final total loss %.6g\n", r.trace.size(), r.trace.back().total);
  return ok;
}

struct AdaptArgs {
  std::string ckpt, task, eval, config, kind = "utterance", out, grid;
  std::optional<double> theta_lr;
  std::optional<std::uint64_t> seed;
  double init_theta = 0.0;
};

Json metric_json(const TaskMetric& m) {
  return {{"loss", m.loss}, {"accuracy", m.accuracy}, {"mean_fires", m.mean_fires}};
}

int run_adapt(const AdaptArgs& a) {
  AdaptConfig cfg = adapt_config_from_json(load_config(a.config));
  cfg.seed = resolve_seed(a.seed);
  if (a.theta_lr) cfg.theta_learning_rate = *a.theta_lr;
  TaskKind kind;
  if (a.kind == "utterance")
    kind = TaskKind::utterance;
  else if (a.kind == "frame")
    kind = TaskKind::frame;
  else
    throw Error(ErrorCode::config, "--kind must be utterance or frame");

  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Corpus train = read_dataset(a.task);
  const Corpus eval = a.eval.empty() ? train : read_dataset(a.eval);
  check_input_dim(ck.dims, train);
  cfg.cif = ck.cif;

  const AdaptResult r = adapt_lambda(ck.student, train, eval, kind, cfg, a.init_theta);
  if (r.saturation_warning)
    std::fprintf(stderr, "warning: theta received no gradient for a full epoch (lambda saturated at %.6g)\n", r.lambda);

  Json trajectory = Json::array();
  for (const auto& s : r.trajectory) trajectory.push_back({{"step", s.step}, {"lambda", s.lambda}, {"loss", s.loss}});
  Json report = {{"task", a.kind},
                 {"lambda", r.lambda},
                 {"theta", r.theta},
                 {"init_theta", a.init_theta},
                 {"theta_learning_rate", cfg.theta_learning_rate},
                 {"seed", cfg.seed},
                 {"saturation_warning", r.saturation_warning},
                 {"metric", metric_json(r.metric)},
                 {"trajectory", trajectory}};
  if (!a.grid.empty()) {
    const auto lambdas = parse_lambdas(a.grid);
    Json grid = Json::array();
    const GridPoint* best = nullptr;
    const auto pts = grid_search(ck.student, train, eval, kind, cfg, lambdas);
    for (const auto& p : pts) {
      grid.push_back({{"lambda", p.lambda}, {"metric", metric_json(p.metric)}});
      if (!best || p.metric.loss < best->metric.loss) best = &p;
    }
    report["grid"] = grid;
    report["grid_best"] = {{"lambda", best->lambda}, {"loss", best->metric.loss}};
    report["relative_to_grid_best"] = r.metric.loss / best->metric.loss - 1.0;
  }
  write_text(a.out, report.dump(2) + "\n");
  std::fprintf(stderr, "learned lambda %.6g, metric %.6g\n", r.lambda, r.metric.loss);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Once-for-all sequence compression: data, training, sweeps, adaptation and profiling"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic corpus: one feature file per utterance plus manifest.json");
  gen->add_option("--spec", spec_path, "JSON synthetic spec")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Seed (falls back to OFA_SEED)");

  PretrainArgs pre, fix;
  auto add_pretrain_flags = [](CLI::App* cmd, PretrainArgs& a) {
    cmd->add_option("--config", a.config, "JSON train config")->required();
    cmd->add_option("--data", a.data, "Corpus directory")->required();
    cmd->add_option("--out", a.out, "Checkpoint path")->required();
    cmd->add_option("--trace", a.trace, "Loss trace CSV (default <out>.trace.csv)");
    cmd->add_option("--seed", a.seed, "Seed (falls back to OFA_SEED)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Once-for-all pre-training over a lambda range");
  add_pretrain_flags(pretrain, pre);
  pretrain->add_option("--range", pre.range, "Lambda range low:high, e.g. 0:1, 0:1.5, 0:2");
  auto* pretrain_fixed = app.add_subcommand("pretrain-fixed", "Pre-train a specialist at one lambda");
  add_pretrain_flags(pretrain_fixed, fix);
  pretrain_fixed->add_option("--lambda", fix.lambda, "Fixed lambda in [0, 2)")->required();

  std::string sw_ckpt, sw_data, sw_lambdas, sw_out;
  auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate a checkpoint over a list or grid of lambdas");
  sweep_cmd->add_option("--ckpt", sw_ckpt, "Checkpoint")->required();
  sweep_cmd->add_option("--data", sw_data, "Corpus directory")->required();
  sweep_cmd->add_option("--lambdas", sw_lambdas, "Comma list or low:high:count")->required();
  sweep_cmd->add_option("--out", sw_out, "CSV output")->required();

  AdaptArgs ad_args;
  auto* adapt = app.add_subcommand("adapt", "Learn lambda jointly with a downstream head");
  adapt->add_option("--ckpt", ad_args.ckpt, "Checkpoint")->required();
  adapt->add_option("--task", ad_args.task, "Labelled training corpus directory")->required();
  adapt->add_option("--eval", ad_args.eval, "Evaluation corpus directory (default: --task)");
  adapt->add_option("--kind", ad_args.kind, "utterance or frame")->capture_default_str();
  adapt->add_option("--theta-lr", ad_args.theta_lr, "Learning rate for theta (default 1e-3)");
  adapt->add_option("--init-theta", ad_args.init_theta, "Initial theta")->capture_default_str();
  adapt->add_option("--config", ad_args.config, "JSON adapt config");
  adapt->add_option("--grid", ad_args.grid, "Also run a fixed-lambda grid search for comparison");
  adapt->add_option("--out", ad_args.out, "JSON report")->required();
  adapt->add_option("--seed", ad_args.seed, "Seed (falls back to OFA_SEED)");

  std::string pr_config, pr_periods = "20,90,160,960", pr_out;
  auto* profile = app.add_subcommand("profile", "MACs reduction for target frame periods");
  profile->add_option("--config", pr_config, "JSON MACs config (default: reference)");
  profile->add_option("--periods", pr_periods, "Comma list of frame periods in ms")->capture_default_str();
  profile->add_option("--out", pr_out, "CSV output (default: stdout)");

  auto* selftest = app.add_subcommand("selftest", "Run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*gen) {
      SyntheticSpec spec = synthetic_spec_from_json(load_json(spec_path));
      spec.seed = resolve_seed(gen_seed);
      const Corpus corpus = generate_corpus(spec);
      write_dataset(out_dir, corpus, to_json(spec));
      std::fprintf(stderr, "wrote %zu utterances to %s\n", corpus.size(), out_dir.c_str());
      return ok;
    }
    if (*pretrain) return run_pretrain(pre, false);
    if (*pretrain_fixed) return run_pretrain(fix, true);
    if (*sweep_cmd) {
      const Checkpoint ck = load_checkpoint(sw_ckpt);
      const Corpus corpus = read_dataset(sw_data);
      check_input_dim(ck.dims, corpus);
      const auto rows = sweep(ck.student, ck.teacher, corpus, parse_lambdas(sw_lambdas), ck.range, ck.cif);
      std::string csv = "lambda,frame_period_ms,mean_fires,loss,macs_reduction\n";
      for (const auto& r : rows) {
        if (r.extrapolated)
          std::fprintf(stderr, "warning: lambda %.6g is outside the trained range [%g, %g]\n", r.lambda, ck.range.low,
                       ck.range.high);
        csv += fmt(r.lambda) + "," + fmt(r.frame_period_ms) + "," + fmt(r.mean_fires) + "," + fmt(r.loss) + "," +
               fmt(r.macs_reduction) + "\n";
      }
      write_text(sw_out, csv);
      return ok;
    }
    if (*adapt) return run_adapt(ad_args);
    if (*profile) {
      const MacsConfig cfg = pr_config.empty() ? MacsConfig::reference() : macs_config_from_json(load_json(pr_config));
      std::string csv = "period_ms,n_base,n_comp,base_macs,compressed_macs,macs_reduction\n";
      for (const auto& r : profile_periods(cfg, parse_list(pr_periods)))
        csv += fmt(r.period_ms) + "," + std::to_string(r.n_base) + "," + std::to_string(r.n_comp) + "," +
               std::to_string(r.base_macs) + "," + std::to_string(r.compressed_macs) + "," + fmt(r.reduction) + "\n";
      if (pr_out.empty())
        std::cout << csv;
      else
        write_text(pr_out, csv);
      return ok;
    }
    if (*selftest) return selftest::run_all(stdout) == 0 ? ok : other;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return other;
  }
  return other;
}
