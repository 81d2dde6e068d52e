#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "maxsr/attention.hpp"
#include "maxsr/blocks.hpp"
#include "maxsr/eval.hpp"
#include "maxsr/fileio.hpp"
#include "maxsr/gradcheck.hpp"
#include "maxsr/kernels.hpp"
#include "maxsr/model.hpp"
#include "maxsr/partition.hpp"
#include "maxsr/train.hpp"

using namespace maxsr;
namespace fs = std::filesystem;

namespace {

struct UpscaleArgs {
  std::string checkpoint, input, output, attention;
  bool self_ensemble = false;
};

struct EvalArgs {
  std::string checkpoint, hr_dir, report = "eval_report";
  int64_t scale = 2;
  int64_t border = -1;
  bool self_ensemble = false;
};

struct TrainArgs {
  std::string config, data_dir, out_checkpoint;
};

struct GradcheckArgs {
  uint64_t seed = 0;
  bool corrupt = false;
};

struct BenchArgs {
  std::vector<int64_t> sizes{16, 32, 64, 128, 256};
  std::string mode = "adaptive";
};

// Everything the toy trainer reads from --config. Unknown keys anywhere are
// rejected by the strict from_json of each section.
struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  EvalSettings eval;
};

CliConfig parse_cli_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("config must be a JSON object");
  CliConfig c;
  // toy-sized defaults; the full-size model is one "model" section away
  c.model.blocks = 2;
  c.model.stages = 2;
  c.model.width = 16;
  c.model.heads = 2;
  c.model.train_patch = 16;
  c.train.batch = 1;
  c.train.lr0 = 1e-3;
  c.train.total_iters = 200;
  c.train.milestones = {200};
  c.train.patch_lr = 16;
  for (auto& [key, value] : j.items()) {
    if (key == "model") {
      auto merged = nlohmann::json(c.model);
      merged.update(value);
      c.model = merged.get<ModelConfig>();
    } else if (key == "train") {
      auto merged = nlohmann::json(c.train);
      merged.update(value);
      c.train = merged.get<TrainConfig>();
    } else if (key == "eval") {
      for (auto& [k, v] : value.items()) {
        if (k == "border") c.eval.border = v.get<int64_t>();
        else if (k == "self_ensemble") c.eval.self_ensemble = v.get<bool>();
        else throw std::runtime_error("config: unknown key eval." + k);
      }
    } else {
      throw std::runtime_error("config: unknown key " + key);
    }
  }
  c.model.validate();
  c.train.validate();
  return c;
}

int cmd_upscale(const UpscaleArgs& a) {
  auto loaded = load_checkpoint(a.checkpoint);
  auto config = loaded.config;
  if (!a.attention.empty()) config.attention = AttentionMode::parse(a.attention);
  const auto lr = to_float(read_png(a.input));
  const auto x = to_tensor(lr);
  Tensor y;
  if (a.self_ensemble) {
    y = self_ensemble_forward(loaded.state, config, x);
  } else {
    NoGradGuard ng;
    y = forward(loaded.state, config, x);
  }
  write_png(a.output, quantize(from_tensor(y)));
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  auto loaded = load_checkpoint(a.checkpoint);
  auto report = evaluate_dataset(loaded.state, loaded.config, a.hr_dir, a.scale, a.border, a.self_ensemble);
  report.settings.dataset = fs::path(a.hr_dir).filename().string();
  if (report.settings.dataset.empty()) report.settings.dataset = fs::path(a.hr_dir).parent_path().filename().string();
  const auto table = format_table(report);
  write_file_atomic(a.report + ".json", nlohmann::json(report).dump(2) + "\n");
  write_file_atomic(a.report + ".txt", table);
  std::cout << table;
  return report.images.empty() ? 1 : 0;
}

int cmd_train_toy(const TrainArgs& a) {
  const auto cfg = parse_cli_config(a.config);
  const auto dataset = load_train_directory(a.data_dir, cfg.model.scale);
  if (dataset.empty()) throw std::runtime_error("no PNG images in " + a.data_dir);
  auto state = build_model<float>(cfg.model, cfg.train.seed);
  std::cerr << "training " << param_count(state) << " parameters on " << dataset.size() << " images\n";
  auto result = train(state, cfg.model, dataset, cfg.train, [](const LossRecord& r) {
    std::cerr << "iter " << r.iter << " loss " << r.loss << " lr " << r.lr << "\n";
  });
  save_checkpoint(state, cfg.model, a.out_checkpoint);
  write_file_atomic(a.out_checkpoint + ".loss.csv", loss_csv(result.trace));
  return 0;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions opt;
  opt.seed = a.seed;
  opt.corrupt_analytic = a.corrupt;
  const auto cases = run_gradcheck_suite(opt);
  bool ok = true;
  std::cout << "case,checked,max_rel_error,status\n";
  for (const auto& c : cases) {
    std::cout << c.name << "," << c.checked << "," << std::scientific << std::setprecision(3) << c.max_rel_error
              << std::defaultfloat << "," << (c.passed ? "pass" : "FAIL") << "\n";
    ok = ok && c.passed;
  }
  std::cerr << (ok ? "all gradient checks passed" : "gradient check FAILED") << " (tolerance " << opt.tolerance
            << ")\n";
  return ok ? 0 : 1;
}

// Largest attention matrix we are willing to materialise for a timing run.
constexpr int64_t kTimingBudget = int64_t{1} << 25;
constexpr int64_t kBenchWidth = 16;
constexpr int64_t kBenchHeads = 2;

int cmd_bench_attention(const BenchArgs& a) {
  const bool global = a.mode == "global";
  AttentionMode mode;
  if (!global) mode = AttentionMode::parse(a.mode == "adaptive" ? "exact" : a.mode);
  for (auto s : a.sizes)
    if (s < 1) throw std::invalid_argument("sizes must be >= 1");

  std::mt19937_64 rng(0);
  ParamInit init(0);
  auto params = init.attention<float>(kBenchWidth, kBenchHeads, false, 0, 0);
  NoGradGuard ng;
  std::vector<double> xs, ys;
  std::cout << "size,cost,wall_ms\n";
  for (auto s : a.sizes) {
    int64_t cost, peak;
    if (global) {
      cost = global_attention_cost(s, s);
      peak = cost;
    } else {
      const auto plan = adaptive_footage(s, s, mode);
      cost = attention_cost(plan);
      peak = std::max(plan.window_count() * plan.window_tokens() * plan.window_tokens(),
                      plan.cell_count() * plan.cell_tokens() * plan.cell_tokens());
    }
    xs.push_back(static_cast<double>(s * s));
    ys.push_back(static_cast<double>(cost));
    std::string wall = "nan";
    if (peak * kBenchHeads <= kTimingBudget) {
      std::uniform_real_distribution<float> d(-1, 1);
      std::vector<float> v(static_cast<size_t>(kBenchWidth * s * s));
      for (auto& e : v) e = d(rng);
      const auto t0 = std::chrono::steady_clock::now();
      if (global) {
        Tensor tokens(Shape{1, s * s, kBenchWidth}, std::move(v));
        (void)multihead_self_attention(tokens, params);
      } else {
        Tensor x(Shape{1, kBenchWidth, s, s}, std::move(v));
        (void)adaptive_grid_attention(adaptive_block_attention(x, params, mode), params, mode);
      }
      const std::chrono::duration<double, std::milli> dt = std::chrono::steady_clock::now() - t0;
      std::ostringstream os;
      os << std::fixed << std::setprecision(3) << dt.count();
      wall = os.str();
    } else {
      std::cerr << "size " << s << ": attention matrix too large to time, wall_ms = nan\n";
    }
    std::cout << s << "," << cost << "," << wall << "\n";
  }
  if (xs.size() >= 2) std::cerr << "log-log slope of cost vs H*W: " << loglog_slope(xs, ys) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::apply_thread_env();
  CLI::App app{"MaxSR super-resolution: upscale, evaluate, toy-train, gradient-check, benchmark"};
  app.require_subcommand(1);
  app.footer("MAXSR_THREADS caps the number of worker threads.");

  UpscaleArgs up;
  auto* s_up = app.add_subcommand("upscale", "Upscale one PNG with a checkpoint");
  s_up->add_option("--checkpoint", up.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  s_up->add_option("--input", up.input, "Low-resolution PNG")->required()->check(CLI::ExistingFile);
  s_up->add_option("--output", up.output, "Output PNG")->required();
  s_up->add_flag("--self-ensemble", up.self_ensemble, "Average over the eight flips/rotations");
  s_up->add_option("--attention", up.attention, "Override attention footage: exact | approx | fixed:P (default: checkpoint's)");

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "PSNR/SSIM on the Y channel over a directory of HR PNGs");
  s_ev->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  s_ev->add_option("--hr-dir", ev.hr_dir, "Directory of HR PNGs")->required()->check(CLI::ExistingDirectory);
  s_ev->add_option("--scale", ev.scale, "Upscaling factor, must match the checkpoint")->required();
  s_ev->add_option("--border", ev.border, "Pixels stripped per side before scoring (default: scale)");
  s_ev->add_flag("--self-ensemble", ev.self_ensemble, "Average over the eight flips/rotations");
  s_ev->add_option("--report", ev.report, "Report path prefix; writes PREFIX.json and PREFIX.txt")
      ->capture_default_str();

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train-toy", "Train a small model from scratch");
  s_tr->add_option("--config", tr.config,
                   "JSON with optional sections model{blocks,stages,width,heads,scale,attention,rpe,"
                   "mask_padding,train_patch}, train{batch,lr0,milestones,decay,total_iters,patch_lr,seed,"
                   "beta1,beta2,eps,augment,log_every}, eval{border,self_ensemble}. Defaults: W=16 B=2 S=2 "
                   "heads=2 r=2, batch 1, lr0 1e-3, 200 iterations, 16x16 LR patches")
      ->required()
      ->check(CLI::ExistingFile);
  s_tr->add_option("--data-dir", tr.data_dir, "Directory of HR training PNGs")->required()->check(CLI::ExistingDirectory);
  s_tr->add_option("--out-checkpoint", tr.out_checkpoint, "Checkpoint to write; the loss trace goes to PATH.loss.csv")
      ->required();

  GradcheckArgs gc;
  auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and a toy network (64-bit)");
  s_gc->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
  s_gc->add_flag("--corrupt-analytic", gc.corrupt)->group("");

  BenchArgs bn;
  auto* s_bn = app.add_subcommand("bench-attention", "Query-key pair counts and wall time per feature-map size");
  s_bn->add_option("--sizes", bn.sizes, "Square feature-map sizes")->delimiter(',')->capture_default_str();
  s_bn->add_option("--mode", bn.mode, "adaptive | approx | fixed:P | global")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*s_up) return cmd_upscale(up);
    if (*s_ev) return cmd_eval(ev);
    if (*s_tr) return cmd_train_toy(tr);
    if (*s_gc) return cmd_gradcheck(gc);
    if (*s_bn) return cmd_bench_attention(bn);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
