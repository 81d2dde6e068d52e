#include "maxsr/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "maxsr/fileio.hpp"
#include "maxsr/ops.hpp"

namespace maxsr {

ModelConfig ModelConfig::maxsr(int64_t scale) {
  ModelConfig c;
  c.blocks = 16;
  c.stages = 4;
  c.width = 128;
  c.heads = 4;
  c.scale = scale;
  return c;
}

ModelConfig ModelConfig::maxsr_light(int64_t scale) {
  ModelConfig c;
  c.blocks = 8;
  c.stages = 4;
  c.width = 48;
  c.heads = 4;
  c.scale = scale;
  return c;
}

void ModelConfig::validate() const {
  if (blocks < 1 || stages < 1) throw std::invalid_argument("blocks and stages must be >= 1");
  if (blocks % stages != 0) {
    throw std::invalid_argument("blocks (" + std::to_string(blocks) + ") must be divisible by stages (" +
                                std::to_string(stages) + ")");
  }
  if (width < 1 || heads < 1) throw std::invalid_argument("width and heads must be >= 1");
  if (width % heads != 0) {
    throw std::invalid_argument("width (" + std::to_string(width) + ") must be divisible by heads (" +
                                std::to_string(heads) + ")");
  }
  upsample_factors(scale);
  if (train_patch < 1) throw std::invalid_argument("train_patch must be >= 1");
  if (attention.kind == FootageKind::kFixed && attention.fixed_size < 1) {
    throw std::invalid_argument("fixed attention footage must be >= 1");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"blocks", c.blocks},       {"stages", c.stages},
                     {"width", c.width},         {"heads", c.heads},
                     {"scale", c.scale},         {"attention", c.attention.str()},
                     {"rpe", c.rpe},             {"mask_padding", c.mask_padding},
                     {"train_patch", c.train_patch}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> kKeys{"blocks", "stages",       "width",      "heads", "scale",
                                           "attention", "rpe", "mask_padding", "train_patch"};
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw std::invalid_argument("unknown model config key '" + key + "'");
  }
  ModelConfig out;
  if (j.contains("blocks")) out.blocks = j.at("blocks").get<int64_t>();
  if (j.contains("stages")) out.stages = j.at("stages").get<int64_t>();
  if (j.contains("width")) out.width = j.at("width").get<int64_t>();
  if (j.contains("heads")) out.heads = j.at("heads").get<int64_t>();
  if (j.contains("scale")) out.scale = j.at("scale").get<int64_t>();
  if (j.contains("attention")) out.attention = AttentionMode::parse(j.at("attention").get<std::string>());
  if (j.contains("rpe")) out.rpe = j.at("rpe").get<bool>();
  if (j.contains("mask_padding")) out.mask_padding = j.at("mask_padding").get<bool>();
  if (j.contains("train_patch")) out.train_patch = j.at("train_patch").get<int64_t>();
  c = out;
}

namespace {

template <typename T>
void push_conv(std::vector<NamedTensor<T>>& out, const std::string& prefix, const ConvParams<T>& p) {
  out.push_back({prefix + ".weight", p.weight, true});
  out.push_back({prefix + ".bias", p.bias, true});
}

template <typename T>
void push_affine(std::vector<NamedTensor<T>>& out, const std::string& prefix, const AffineParams<T>& p) {
  out.push_back({prefix + ".weight", p.gamma, true});
  out.push_back({prefix + ".bias", p.beta, true});
}

template <typename T>
void push_unit(std::vector<NamedTensor<T>>& out, const std::string& prefix,
               const AttentionUnitParams<T>& p) {
  push_affine(out, prefix + ".norm1", p.attn_norm);
  out.push_back({prefix + ".attn.qkv.weight", p.attn.qkv_weight, true});
  out.push_back({prefix + ".attn.qkv.bias", p.attn.qkv_bias, true});
  out.push_back({prefix + ".attn.proj.weight", p.attn.out_weight, true});
  out.push_back({prefix + ".attn.proj.bias", p.attn.out_bias, true});
  if (p.attn.has_rpe()) out.push_back({prefix + ".attn.rpe_table", p.attn.rpe_table, true});
  push_affine(out, prefix + ".norm2", p.ffn_norm);
  push_conv(out, prefix + ".ffn.fc1", p.fc1);
  push_conv(out, prefix + ".ffn.fc2", p.fc2);
}

}  // namespace

template <typename T>
std::vector<NamedTensor<T>> named_tensors(const ModelState<T>& s) {
  std::vector<NamedTensor<T>> out;
  push_conv(out, "sfeb.conv1", s.sfeb.conv1);
  push_conv(out, "sfeb.conv2", s.sfeb.conv2);
  for (size_t b = 0; b < s.amtbs.size(); ++b) {
    const std::string pre = "amtb." + std::to_string(b);
    const auto& m = s.amtbs[b].mbconv;
    out.push_back({pre + ".mbconv.norm.weight", m.norm.gamma, true});
    out.push_back({pre + ".mbconv.norm.bias", m.norm.beta, true});
    out.push_back({pre + ".mbconv.norm.running_mean", m.norm.running_mean, false});
    out.push_back({pre + ".mbconv.norm.running_var", m.norm.running_var, false});
    push_conv(out, pre + ".mbconv.expand", m.expand);
    push_conv(out, pre + ".mbconv.depthwise", m.depthwise);
    push_conv(out, pre + ".mbconv.se.reduce", m.se_reduce);
    push_conv(out, pre + ".mbconv.se.expand", m.se_expand);
    push_conv(out, pre + ".mbconv.project", m.project);
    push_unit(out, pre + ".block", s.amtbs[b].block);
    push_unit(out, pre + ".grid", s.amtbs[b].grid);
  }
  push_conv(out, "hffb.fuse", s.hffb.fuse);
  push_conv(out, "hffb.conv", s.hffb.conv);
  for (size_t i = 0; i < s.rb.upsample.size(); ++i) push_conv(out, "rb.up." + std::to_string(i), s.rb.upsample[i]);
  push_conv(out, "rb.out", s.rb.output);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(const ModelState<T>& s) {
  auto all = named_tensors(s);
  std::erase_if(all, [](const NamedTensor<T>& t) { return !t.trainable; });
  return all;
}

template <typename T>
ModelState<T> build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ParamInit init(seed);
  const int64_t w = config.width;
  ModelState<T> s;
  s.config = config;
  s.sfeb.conv1 = init.conv<T>(3, w, 3);
  s.sfeb.conv2 = init.conv<T>(w, w, 3);
  // Relative-position tables are sized for the training patch footage.
  const auto plan = adaptive_footage(config.train_patch, config.train_patch, config.attention);
  for (int64_t b = 0; b < config.blocks; ++b) {
    AMTBParams<T> p;
    p.mbconv = init.mbconv<T>(w);
    p.block = init.attention_unit<T>(w, config.heads, config.rpe, plan.win_h, plan.win_w);
    p.grid = init.attention_unit<T>(w, config.heads, config.rpe, plan.grid_h, plan.grid_w);
    s.amtbs.push_back(std::move(p));
  }
  s.hffb.fuse = init.conv<T>(config.stages * w, w, 1);
  s.hffb.conv = init.conv<T>(w, w, 3);
  s.rb.factors = upsample_factors(config.scale);
  for (int64_t f : s.rb.factors) s.rb.upsample.push_back(init.conv<T>(w, w * f * f, 3));
  s.rb.output = init.conv<T>(w, 3, 3);
  return s;
}

template <typename T>
BasicTensor<T> forward(ModelState<T>& state, const ModelConfig& config, const BasicTensor<T>& x,
                       bool training) {
  const auto& sc = state.config;
  if (config.blocks != sc.blocks || config.stages != sc.stages || config.width != sc.width ||
      config.heads != sc.heads || config.scale != sc.scale || config.rpe != sc.rpe) {
    throw std::invalid_argument("forward: config structure does not match the model state");
  }
  const auto stages = StagePlan::make(config.blocks, config.stages);
  const BlockContext ctx{config.attention, AttentionOptions{config.mask_padding}, training};
  auto [f_minus1, f] = sfeb_forward(x, state.sfeb);
  std::vector<BasicTensor<T>> stage_outputs;
  for (int64_t b = 1; b <= config.blocks; ++b) {
    f = amtb_forward(f, state.amtbs[static_cast<size_t>(b - 1)], ctx);
    if (stages.is_fusion_point(b)) stage_outputs.push_back(f);
  }
  const auto fused = hffb_forward(f_minus1, stage_outputs, state.hffb);
  return rb_forward(fused, state.rb);
}

template <typename T>
int64_t param_count(const ModelState<T>& state) {
  int64_t n = 0;
  for (const auto& t : trainable_tensors(state)) n += t.tensor.numel();
  return n;
}

namespace {

constexpr char kMagic[7] = {'M', 'A', 'X', 'S', 'R', '1', '\0'};
constexpr uint8_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

template <typename U>
void put_le(std::string& out, U v) {
  for (size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::string bytes_;
  size_t pos_ = 0;
};

struct RawTensor {
  Shape shape;
  std::vector<float> values;
};

struct ParsedCheckpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, RawTensor>> tensors;
};

ParsedCheckpoint parse_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  Reader r(buf.str());
  const std::string magic = r.take(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = r.le<uint8_t>();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  ParsedCheckpoint out;
  const auto json_len = r.le<uint32_t>();
  try {
    out.config = nlohmann::json::parse(r.take(json_len)).get<ModelConfig>();
    out.config.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
  }
  const auto count = r.le<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<uint16_t>();
    std::string name = r.take(name_len);
    const auto dtype = r.le<uint8_t>();
    if (dtype != kDtypeF32) throw CheckpointError("tensor " + name + ": unsupported dtype " + std::to_string(dtype));
    const auto rank = r.le<uint8_t>();
    if (rank > Shape::kMaxRank) throw CheckpointError("tensor " + name + ": rank " + std::to_string(rank));
    std::vector<int64_t> dims;
    for (uint8_t d = 0; d < rank; ++d) dims.push_back(r.le<uint32_t>());
    RawTensor t{Shape(dims), {}};
    t.values.resize(static_cast<size_t>(t.shape.numel()));
    for (auto& v : t.values) {
      const auto bits = r.le<uint32_t>();
      std::memcpy(&v, &bits, sizeof(v));
    }
    out.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint tensors");
  return out;
}

bool skipped(const std::string& name, const std::vector<std::string>& prefixes) {
  return std::any_of(prefixes.begin(), prefixes.end(),
                     [&](const std::string& p) { return name.rfind(p, 0) == 0; });
}

void apply_checkpoint(ModelState<float>& state, const ParsedCheckpoint& ckpt,
                      const std::vector<std::string>& skip_prefixes) {
  std::map<std::string, const RawTensor*> file;
  for (const auto& [name, t] : ckpt.tensors) {
    if (skipped(name, skip_prefixes)) continue;
    if (!file.emplace(name, &t).second) throw CheckpointError("duplicate tensor " + name);
  }
  auto targets = named_tensors(state);
  std::erase_if(targets, [&](const NamedTensor<float>& t) { return skipped(t.name, skip_prefixes); });
  // Validate everything before touching the state.
  if (targets.size() != file.size()) {
    throw CheckpointError("name-set mismatch: model has " + std::to_string(targets.size()) +
                          " tensors, checkpoint has " + std::to_string(file.size()));
  }
  for (const auto& t : targets) {
    auto it = file.find(t.name);
    if (it == file.end()) throw CheckpointError("name-set mismatch: checkpoint lacks " + t.name);
    if (it->second->shape != t.tensor.shape()) {
      throw CheckpointError("name-set mismatch: " + t.name + " is " + it->second->shape.str() +
                            " in checkpoint, " + t.tensor.shape().str() + " in model");
    }
  }
  for (auto& t : targets) {
    const auto& src = file.at(t.name)->values;
    std::copy(src.begin(), src.end(), t.tensor.mutable_data().begin());
  }
}

}  // namespace

void save_checkpoint(const ModelState<float>& state, const ModelConfig& config,
                     const std::filesystem::path& path) {
  config.validate();
  std::string out(kMagic, sizeof(kMagic));
  put_le<uint8_t>(out, kVersion);
  const std::string cfg = nlohmann::json(config).dump();
  put_le<uint32_t>(out, static_cast<uint32_t>(cfg.size()));
  out += cfg;
  const auto tensors = named_tensors(state);
  put_le<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_le<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
    out += t.name;
    put_le<uint8_t>(out, kDtypeF32);
    put_le<uint8_t>(out, static_cast<uint8_t>(t.tensor.rank()));
    for (int64_t d : t.tensor.shape().dims()) put_le<uint32_t>(out, static_cast<uint32_t>(d));
    for (float v : t.tensor.data()) {
      uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      put_le<uint32_t>(out, bits);
    }
  }
  write_file_atomic(path, out);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  const auto ckpt = parse_checkpoint(path);
  LoadedModel m{ckpt.config, build_model<float>(ckpt.config, 0)};
  apply_checkpoint(m.state, ckpt, {});
  return m;
}

void load_checkpoint_into(ModelState<float>& state, const std::filesystem::path& path,
                          const std::vector<std::string>& skip_prefixes) {
  const auto ckpt = parse_checkpoint(path);
  apply_checkpoint(state, ckpt, skip_prefixes);
}

#define MAXSR_INSTANTIATE(T)                                                                   \
  template std::vector<NamedTensor<T>> named_tensors(const ModelState<T>&);                    \
  template std::vector<NamedTensor<T>> trainable_tensors(const ModelState<T>&);                \
  template ModelState<T> build_model<T>(const ModelConfig&, uint64_t);                         \
  template BasicTensor<T> forward(ModelState<T>&, const ModelConfig&, const BasicTensor<T>&,   \
                                  bool);                                                       \
  template int64_t param_count(const ModelState<T>&);

MAXSR_INSTANTIATE(float)
MAXSR_INSTANTIATE(double)
#undef MAXSR_INSTANTIATE

}  // namespace maxsr
