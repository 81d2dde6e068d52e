#include "maxsr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "maxsr/dihedral.hpp"
#include "maxsr/ops.hpp"

namespace maxsr {

void TrainConfig::validate() const {
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be positive");
  if (!(decay > 0.0)) throw std::invalid_argument("decay must be positive");
  if (total_iters < 0) throw std::invalid_argument("total_iters must be >= 0");
  if (patch_lr < 1) throw std::invalid_argument("patch_lr must be >= 1");
  if (log_every < 1) throw std::invalid_argument("log_every must be >= 1");
  for (size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      throw std::invalid_argument("milestones must be non-negative and strictly increasing");
    }
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw std::invalid_argument("Adam hyper-parameters out of range");
  }
}

TrainConfig TrainConfig::finetune() const {
  TrainConfig c = *this;
  c.lr0 = lr0 / 2.0;
  c.total_iters = total_iters / 2;
  c.milestones.clear();
  for (int64_t m : milestones) {
    // halving can merge neighbours; keep the list strictly increasing
    if (c.milestones.empty() || m / 2 > c.milestones.back()) c.milestones.push_back(m / 2);
  }
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch", c.batch},       {"lr0", c.lr0},     {"milestones", c.milestones},
                     {"decay", c.decay},       {"total_iters", c.total_iters},
                     {"patch_lr", c.patch_lr}, {"seed", c.seed},   {"beta1", c.beta1},
                     {"beta2", c.beta2},       {"eps", c.eps},     {"augment", c.augment},
                     {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> kKeys{"batch", "lr0",   "milestones", "decay", "total_iters", "patch_lr",
                                           "seed",  "beta1", "beta2",      "eps",   "augment",     "log_every"};
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  TrainConfig out;
  if (j.contains("batch")) out.batch = j.at("batch").get<int64_t>();
  if (j.contains("lr0")) out.lr0 = j.at("lr0").get<double>();
  if (j.contains("milestones")) out.milestones = j.at("milestones").get<std::vector<int64_t>>();
  if (j.contains("decay")) out.decay = j.at("decay").get<double>();
  if (j.contains("total_iters")) out.total_iters = j.at("total_iters").get<int64_t>();
  if (j.contains("patch_lr")) out.patch_lr = j.at("patch_lr").get<int64_t>();
  if (j.contains("seed")) out.seed = j.at("seed").get<uint64_t>();
  if (j.contains("beta1")) out.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) out.beta2 = j.at("beta2").get<double>();
  if (j.contains("eps")) out.eps = j.at("eps").get<double>();
  if (j.contains("augment")) out.augment = j.at("augment").get<bool>();
  if (j.contains("log_every")) out.log_every = j.at("log_every").get<int64_t>();
  c = out;
}

Tensor mae_loss(const Tensor& prediction, const Tensor& target) { return l1_loss(prediction, target); }

namespace {

Tensor crop_chw(const Tensor& x, int64_t top, int64_t left, int64_t h, int64_t w) {
  const int64_t c = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::vector<float> v(static_cast<size_t>(c * h * w));
  const auto src = x.data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      std::copy_n(src.begin() + (ch * H + top + y) * W + left, w, v.begin() + (ch * h + y) * w);
  return Tensor(Shape{c, h, w}, std::move(v));
}

}  // namespace

PatchPair sample_patch_pair(const std::vector<TrainImage>& dataset, int64_t scale, int64_t patch,
                            std::mt19937_64& rng) {
  if (dataset.empty()) throw std::invalid_argument("cannot sample from an empty dataset");
  if (patch < 1) throw std::invalid_argument("patch must be >= 1");
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
  const size_t idx = pick(rng);
  const auto& im = dataset[idx];
  const int64_t h = im.lr.dim(1), w = im.lr.dim(2);
  if (h < patch || w < patch) {
    throw std::invalid_argument("image " + im.id + " (" + std::to_string(h) + "x" + std::to_string(w) +
                                ") is smaller than the " + std::to_string(patch) + " patch");
  }
  if (im.hr.dim(1) != h * scale || im.hr.dim(2) != w * scale) {
    throw ShapeError("image " + im.id + ": HR extent is not x" + std::to_string(scale) + " the LR extent");
  }
  std::uniform_int_distribution<int64_t> ty(0, h - patch), tx(0, w - patch);
  PatchPair p;
  p.image = idx;
  p.top = ty(rng);
  p.left = tx(rng);
  p.lr_patch = crop_chw(im.lr, p.top, p.left, patch, patch);
  p.hr_patch = crop_chw(im.hr, p.top * scale, p.left * scale, patch * scale, patch * scale);
  return p;
}

PatchPair augment(const PatchPair& pair, int code) {
  check_dihedral_code(code);
  PatchPair out = pair;
  out.lr_patch = apply_dihedral(pair.lr_patch, code);
  out.hr_patch = apply_dihedral(pair.hr_patch, code);
  return out;
}

double lr_schedule(int64_t iter, const TrainConfig& cfg) {
  const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(),
                                    [iter](int64_t m) { return m <= iter; });
  return cfg.lr0 / std::pow(cfg.decay, static_cast<double>(passed));
}

template <typename T>
void adam_step(std::vector<BasicTensor<T>>& params, OptimizerMoments<T>& m, double lr, const AdamHyper& hp) {
  if (m.first.empty()) {
    for (const auto& p : params) {
      m.first.emplace_back(static_cast<size_t>(p.numel()), T(0));
      m.second.emplace_back(static_cast<size_t>(p.numel()), T(0));
    }
  }
  if (m.first.size() != params.size()) throw std::invalid_argument("adam_step: moment count mismatch");
  m.step += 1;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(m.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(m.step));
  for (size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const T>{};
    auto v = p.mutable_data();
    auto& m1 = m.first[k];
    auto& m2 = m.second[k];
    for (size_t i = 0; i < v.size(); ++i) {
      const double gi = has ? static_cast<double>(g[i]) : 0.0;
      const double a = hp.beta1 * m1[i] + (1.0 - hp.beta1) * gi;
      const double b = hp.beta2 * m2[i] + (1.0 - hp.beta2) * gi * gi;
      m1[i] = static_cast<T>(a);
      m2[i] = static_cast<T>(b);
      v[i] = static_cast<T>(v[i] - lr * (a / c1) / (std::sqrt(b / c2) + hp.eps));
    }
  }
}

template <typename T>
void adam_step(ModelState<T>& state, double lr, const AdamHyper& hyper) {
  std::vector<BasicTensor<T>> params;
  for (auto& t : trainable_tensors(state)) params.push_back(t.tensor);
  adam_step(params, state.moments, lr, hyper);
}

TrainResult train(ModelState<float>& state, const ModelConfig& config, const std::vector<TrainImage>& dataset,
                  const TrainConfig& cfg, const std::function<void(const LossRecord&)>& on_record) {
  cfg.validate();
  config.validate();
  TrainResult result;
  if (cfg.total_iters == 0) return result;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> code_dist(0, kDihedralCodes - 1);
  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.eps};
  std::vector<Tensor> params;
  for (auto& t : trainable_tensors(state)) params.push_back(t.tensor);

  const int64_t p = cfg.patch_lr, r = config.scale;
  for (int64_t iter = 0; iter < cfg.total_iters; ++iter) {
    std::vector<float> lr_batch, hr_batch;
    lr_batch.reserve(static_cast<size_t>(cfg.batch * 3 * p * p));
    hr_batch.reserve(static_cast<size_t>(cfg.batch * 3 * p * p * r * r));
    for (int64_t b = 0; b < cfg.batch; ++b) {
      PatchPair pair = sample_patch_pair(dataset, r, p, rng);
      if (cfg.augment) pair = augment(pair, code_dist(rng));
      lr_batch.insert(lr_batch.end(), pair.lr_patch.data().begin(), pair.lr_patch.data().end());
      hr_batch.insert(hr_batch.end(), pair.hr_patch.data().begin(), pair.hr_patch.data().end());
    }
    const Tensor x(Shape{cfg.batch, 3, p, p}, std::move(lr_batch));
    const Tensor y(Shape{cfg.batch, 3, p * r, p * r}, std::move(hr_batch));

    Tensor loss;
    try {
      loss = mae_loss(forward(state, config, x, true), y);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at iteration " + std::to_string(iter) + ": " + e.what());
    }
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(iter));
    }
    for (auto& t : params) t.zero_grad();
    backward(loss);
    const double lr = lr_schedule(iter, cfg);
    adam_step(params, state.moments, lr, hyper);

    if (iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters) {
      const LossRecord rec{iter, value, lr};
      result.trace.push_back(rec);
      if (on_record) on_record(rec);
    }
  }
  return result;
}

std::string loss_csv(const std::vector<LossRecord>& trace) {
  std::ostringstream os;
  os.precision(9);
  os << "iteration,loss,lr\n";
  for (const auto& r : trace) os << r.iter << ',' << r.loss << ',' << r.lr << '\n';
  return os.str();
}

TrainImage make_train_image(const std::string& id, const FloatImage& hr_full, int64_t scale) {
  const int64_t h = hr_full.height / scale * scale;
  const int64_t w = hr_full.width / scale * scale;
  if (h < scale || w < scale) throw std::invalid_argument(id + " is smaller than the scale factor");
  const FloatImage hr = crop(hr_full, h, w);
  const FloatImage lr = quantize_float(bicubic_resize(hr, h / scale, w / scale, true));
  TrainImage t;
  t.id = id;
  t.lr = to_tensor(lr).reshape(Shape{3, h / scale, w / scale});
  t.hr = to_tensor(hr).reshape(Shape{3, h, w});
  return t;
}

std::vector<TrainImage> synthetic_dataset(int64_t count, int64_t hr_size, int64_t scale, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TrainImage> out;
  for (int64_t n = 0; n < count; ++n) {
    FloatImage im(3, hr_size, hr_size);
    for (int64_t c = 0; c < 3; ++c) {
      struct Wave {
        double fy, fx, phase, amp;
      };
      std::vector<Wave> waves;
      for (int k = 0; k < 3; ++k) {
        const double freq = 0.02 + 0.10 * u(rng);
        const double theta = 2.0 * std::numbers::pi * u(rng);
        waves.push_back({freq * std::sin(theta), freq * std::cos(theta), 2.0 * std::numbers::pi * u(rng),
                         0.08 + 0.12 * u(rng)});
      }
      const double base = 0.3 + 0.4 * u(rng);
      const double gy = 0.2 * (u(rng) - 0.5), gx = 0.2 * (u(rng) - 0.5);
      for (int64_t y = 0; y < hr_size; ++y)
        for (int64_t x = 0; x < hr_size; ++x) {
          double v = base + gy * y / hr_size + gx * x / hr_size;
          for (const auto& w : waves) v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fy * y + w.fx * x) + w.phase);
          im.at(c, y, x) = v;
        }
    }
    out.push_back(make_train_image("synthetic-" + std::to_string(n), quantize_float(im), scale));
  }
  return out;
}

std::vector<TrainImage> load_train_directory(const std::filesystem::path& dir, int64_t scale) {
  if (!std::filesystem::is_directory(dir)) throw std::invalid_argument(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<TrainImage> out;
  for (const auto& f : files) out.push_back(make_train_image(f.filename().string(), to_float(read_png(f)), scale));
  if (out.empty()) throw std::invalid_argument("no PNG images in " + dir.string());
  return out;
}

template void adam_step(std::vector<BasicTensor<float>>&, OptimizerMoments<float>&, double, const AdamHyper&);
template void adam_step(std::vector<BasicTensor<double>>&, OptimizerMoments<double>&, double, const AdamHyper&);
template void adam_step(ModelState<float>&, double, const AdamHyper&);
template void adam_step(ModelState<double>&, double, const AdamHyper&);

}  // namespace maxsr
