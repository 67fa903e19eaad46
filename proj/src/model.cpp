#include "labelseg/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace labelseg {

int UNetConfig::width(int level) const {
  std::int64_t w = base_features;
  for (int i = 0; i < level; ++i) w *= 2;
  return static_cast<int>(std::min<std::int64_t>(w, max_features));
}

void UNetConfig::validate() const {
  if (in_channels < 1) throw ValidationError("unet: in_channels must be >= 1");
  if (num_classes < 2) throw ValidationError("unet: num_classes must be >= 2");
  if (base_features < 1 || max_features < base_features) {
    throw ValidationError("unet: need 1 <= base_features <= max_features");
  }
  if (num_resolution_reductions < 1) throw ValidationError("unet: need at least one reduction");
  if (deep_supervision_levels < 1 || deep_supervision_levels > num_resolution_reductions) {
    throw ValidationError("unet: deep_supervision_levels must be in [1, num_resolution_reductions]");
  }
  if (!(negative_slope >= 0.0 && negative_slope < 1.0)) {
    throw ValidationError("unet: negative_slope must be in [0, 1)");
  }
  const std::int64_t div = std::int64_t{1} << num_resolution_reductions;
  for (auto n : patch_shape) {
    if (n < 1 || n % div != 0) {
      throw ValidationError("unet: patch dimension " + std::to_string(n) + " not divisible by 2^" +
                            std::to_string(num_resolution_reductions));
    }
  }
}

nlohmann::json to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"base_features", c.base_features},
          {"max_features", c.max_features},
          {"num_resolution_reductions", c.num_resolution_reductions},
          {"norm", c.norm == NormKind::kInstance ? "instance" : "none"},
          {"negative_slope", c.negative_slope},
          {"deep_supervision_levels", c.deep_supervision_levels},
          {"patch_shape", c.patch_shape}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j, UNetConfig c) {
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.base_features = j.value("base_features", c.base_features);
    c.max_features = j.value("max_features", c.max_features);
    c.num_resolution_reductions = j.value("num_resolution_reductions", c.num_resolution_reductions);
    if (j.contains("norm")) {
      const auto n = j.at("norm").get<std::string>();
      if (n == "instance") {
        c.norm = NormKind::kInstance;
      } else if (n == "none") {
        c.norm = NormKind::kNone;
      } else {
        throw ValidationError("unet: unknown norm '" + n + "'");
      }
    }
    c.negative_slope = j.value("negative_slope", c.negative_slope);
    c.deep_supervision_levels = j.value("deep_supervision_levels", c.deep_supervision_levels);
    if (j.contains("patch_shape")) c.patch_shape = j.at("patch_shape").get<std::array<std::int64_t, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("unet config: ") + e.what());
  }
  return c;
}

ConvBlock::ConvBlock(int in, int out, int stride, NormKind norm, double slope, const std::string& name)
    : norm_(norm),
      slope_(static_cast<float>(slope)),
      conv1_(in, out, 3, stride, false, name + ".conv1"),
      conv2_(out, out, 3, 1, false, name + ".conv2") {
  if (norm == NormKind::kInstance) {
    norm1_ = nn::InstanceNorm(out, name + ".norm1");
    norm2_ = nn::InstanceNorm(out, name + ".norm2");
  }
}

void ConvBlock::init(std::mt19937_64& rng) {
  conv1_.init(slope_, rng);
  conv2_.init(slope_, rng);
  if (norm_ == NormKind::kInstance) {
    norm1_.init();
    norm2_.init();
  }
}

std::vector<nn::Param*> ConvBlock::params() {
  std::vector<nn::Param*> out;
  auto add = [&](std::vector<nn::Param*> v) { out.insert(out.end(), v.begin(), v.end()); };
  add(conv1_.params());
  if (norm_ == NormKind::kInstance) add(norm1_.params());
  add(conv2_.params());
  if (norm_ == NormKind::kInstance) add(norm2_.params());
  return out;
}

nn::Tensor ConvBlock::forward(const nn::Tensor& x, Cache* cache) const {
  nn::Tensor h = conv1_.forward(x);
  if (norm_ == NormKind::kInstance) h = norm1_.forward(h, cache ? &cache->norm1 : nullptr);
  nn::leaky_relu_inplace(h, slope_);
  nn::Tensor y = conv2_.forward(h);
  if (norm_ == NormKind::kInstance) y = norm2_.forward(y, cache ? &cache->norm2 : nullptr);
  nn::leaky_relu_inplace(y, slope_);
  if (cache) {
    cache->input = x;
    cache->mid = std::move(h);
    cache->out = y;
  }
  return y;
}

nn::Tensor ConvBlock::backward(Cache& cache, nn::Tensor dy, bool need_input_grad) {
  nn::leaky_relu_backward_inplace(dy, cache.out, slope_);
  if (norm_ == NormKind::kInstance) dy = norm2_.backward(cache.norm2, dy);
  nn::Tensor dh = conv2_.backward(cache.mid, dy, true);
  nn::leaky_relu_backward_inplace(dh, cache.mid, slope_);
  if (norm_ == NormKind::kInstance) dh = norm1_.backward(cache.norm1, dh);
  return conv1_.backward(cache.input, dh, need_input_grad);
}

Network::Network(const UNetConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  const int r = config_.num_resolution_reductions;
  const double slope = config_.negative_slope;
  encoder_.emplace_back(config_.in_channels, config_.width(0), 1, config_.norm, slope, "enc0");
  for (int l = 1; l <= r; ++l) {
    encoder_.emplace_back(config_.width(l - 1), config_.width(l), 2, config_.norm, slope,
                          "enc" + std::to_string(l));
  }
  for (int l = 0; l < r; ++l) {
    up_.emplace_back(config_.width(l + 1), config_.width(l), "up" + std::to_string(l));
    decoder_.emplace_back(2 * config_.width(l), config_.width(l), 1, config_.norm, slope,
                          "dec" + std::to_string(l));
  }
  for (int s = 0; s < config_.deep_supervision_levels; ++s) {
    heads_.emplace_back(config_.width(s), config_.num_classes, 1, 1, true, "head" + std::to_string(s));
  }
  std::mt19937_64 rng(seed);
  for (auto& b : encoder_) b.init(rng);
  for (int l = r - 1; l >= 0; --l) {
    up_[static_cast<std::size_t>(l)].init(slope, rng);
    decoder_[static_cast<std::size_t>(l)].init(rng);
  }
  for (auto& h : heads_) h.init(slope, rng);
}

std::unique_ptr<Network> build_network(const UNetConfig& config, std::uint64_t seed) {
  return std::make_unique<Network>(config, seed);
}

void Network::check_input(const nn::Tensor& x, bool any_shape) const {
  if (x.channels != config_.in_channels) {
    throw ShapeError("network expects " + std::to_string(config_.in_channels) +
                     " input channel(s), got " + std::to_string(x.channels));
  }
  const Shape3 want{config_.patch_shape[0], config_.patch_shape[1], config_.patch_shape[2]};
  if (!any_shape) {
    if (!(x.shape == want)) {
      throw ShapeError("network expects patch " + to_string(want) + ", got " + to_string(x.shape));
    }
    return;
  }
  const std::int64_t div = std::int64_t{1} << config_.num_resolution_reductions;
  for (int a = 0; a < 3; ++a) {
    if (x.shape[a] % div != 0) {
      throw ShapeError("input dimension not divisible by " + std::to_string(div));
    }
  }
}

std::vector<nn::Tensor> Network::forward(const nn::Tensor& x, bool any_shape) const {
  check_input(x, any_shape);
  const int r = config_.num_resolution_reductions;
  const int levels = mode_ == NetworkMode::kTrain ? config_.deep_supervision_levels : 1;
  std::vector<nn::Tensor> skips;
  skips.reserve(static_cast<std::size_t>(r + 1));
  skips.push_back(encoder_[0].forward(x));
  for (int l = 1; l <= r; ++l) skips.push_back(encoder_[static_cast<std::size_t>(l)].forward(skips.back()));
  std::vector<nn::Tensor> out(static_cast<std::size_t>(levels));
  nn::Tensor cur = std::move(skips[static_cast<std::size_t>(r)]);
  for (int l = r - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    nn::Tensor up = up_[li].forward(cur);
    cur = decoder_[li].forward(nn::concat(up, skips[li]));
    if (l < levels) out[li] = nn::softmax(heads_[li].forward(cur));
  }
  return out;
}

std::vector<nn::Tensor> Network::forward_train(const nn::Tensor& x, TrainCache& cache, bool any_shape) const {
  check_input(x, any_shape);
  const int r = config_.num_resolution_reductions;
  const int levels = config_.deep_supervision_levels;
  cache.encoder.assign(static_cast<std::size_t>(r + 1), {});
  cache.decoder.assign(static_cast<std::size_t>(r), {});
  cache.up_inputs.assign(static_cast<std::size_t>(r), {});
  cache.probs.assign(static_cast<std::size_t>(levels), {});
  nn::Tensor cur = encoder_[0].forward(x, &cache.encoder[0]);
  for (int l = 1; l <= r; ++l) {
    cur = encoder_[static_cast<std::size_t>(l)].forward(cur, &cache.encoder[static_cast<std::size_t>(l)]);
  }
  for (int l = r - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    nn::Tensor up = up_[li].forward(cur);
    cache.up_inputs[li] = std::move(cur);
    cur = decoder_[li].forward(nn::concat(up, cache.encoder[li].out), &cache.decoder[li]);
    if (l < levels) cache.probs[li] = nn::softmax(heads_[li].forward(cur));
  }
  return cache.probs;
}

void Network::backward(TrainCache& cache, const std::vector<nn::Tensor>& dprobs) {
  const int r = config_.num_resolution_reductions;
  const int levels = config_.deep_supervision_levels;
  if (static_cast<int>(dprobs.size()) != levels) {
    throw ShapeError("backward: expected " + std::to_string(levels) + " probability gradients");
  }
  std::vector<nn::Tensor> dskip(static_cast<std::size_t>(r));
  nn::Tensor dcur;  // gradient w.r.t. the output of decoder block at the current level
  for (int l = 0; l < r; ++l) {
    const auto li = static_cast<std::size_t>(l);
    auto& dc = cache.decoder[li];
    nn::Tensor dout;
    if (l < levels) {
      const nn::Tensor dlogits = nn::softmax_backward(cache.probs[li], dprobs[li]);
      dout = heads_[li].backward(dc.out, dlogits, true);
      if (!dcur.data.empty()) {
        for (std::size_t i = 0; i < dout.data.size(); ++i) dout.data[i] += dcur.data[i];
      }
    } else {
      dout = std::move(dcur);
    }
    nn::Tensor dcat = decoder_[li].backward(dc, std::move(dout), true);
    const int w = config_.width(l);
    const std::size_t split = static_cast<std::size_t>(w) * dcat.voxels();
    nn::Tensor dup(w, dcat.shape);
    std::copy(dcat.data.begin(), dcat.data.begin() + static_cast<std::ptrdiff_t>(split), dup.data.begin());
    dskip[li] = nn::Tensor(w, dcat.shape);
    std::copy(dcat.data.begin() + static_cast<std::ptrdiff_t>(split), dcat.data.end(), dskip[li].data.begin());
    dcur = up_[li].backward(cache.up_inputs[li], dup);
  }
  // dcur now holds the gradient w.r.t. the bottleneck output.
  for (int l = r; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    if (l < r) {
      for (std::size_t i = 0; i < dcur.data.size(); ++i) dcur.data[i] += dskip[li].data[i];
    }
    dcur = encoder_[li].backward(cache.encoder[li], std::move(dcur), l > 0);
  }
}

std::vector<nn::Param*> Network::params() {
  std::vector<nn::Param*> out;
  auto add = [&](std::vector<nn::Param*> v) { out.insert(out.end(), v.begin(), v.end()); };
  for (auto& b : encoder_) add(b.params());
  for (std::size_t l = 0; l < up_.size(); ++l) {
    add(up_[l].params());
    add(decoder_[l].params());
  }
  for (auto& h : heads_) add(h.params());
  return out;
}

std::vector<const nn::Param*> Network::params() const {
  auto mut = const_cast<Network*>(this)->params();
  return {mut.begin(), mut.end()};
}

void Network::zero_grad() {
  for (auto* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

std::size_t count_parameters(const Network& net) {
  std::size_t n = 0;
  for (const auto* p : net.params()) n += p->size();
  return n;
}

nn::Tensor to_tensor(const Volume3D& patch) {
  nn::Tensor t(1, patch.shape);
  std::copy(patch.data.begin(), patch.data.end(), t.data.begin());
  return t;
}

namespace {

constexpr char kMagic[8] = {'L', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t& pos, const std::filesystem::path& path) {
  if (pos + sizeof(T) > buf.size()) throw FormatError("truncated checkpoint: " + path.string());
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_checkpoint(const Network& net, const CheckpointInfo& info, const std::filesystem::path& path) {
  nlohmann::json header = {{"version", kCheckpointVersion},
                           {"config", to_json(net.config())},
                           {"seed", info.seed},
                           {"epoch", info.epoch},
                           {"split_id", info.split_id}};
  nlohmann::json plist = nlohmann::json::array();
  for (const auto* p : net.params()) plist.push_back({{"name", p->name}, {"size", p->size()}});
  header["params"] = plist;
  const std::string hs = header.dump();

  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint64_t>(buf, hs.size());
  buf += hs;
  for (const auto* p : net.params()) {
    buf.append(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(float));
  }
  put<std::uint64_t>(buf, fnv1a(buf));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < sizeof(kMagic) + 4 + 8 + 8 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  std::size_t tail = buf.size() - 8;
  std::uint64_t stored_sum = 0;
  std::memcpy(&stored_sum, buf.data() + tail, 8);
  if (fnv1a(buf.substr(0, tail)) != stored_sum) {
    throw FormatError("checkpoint checksum mismatch (corrupted file): " + path.string());
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(buf, pos, path);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  const auto hlen = get<std::uint64_t>(buf, pos, path);
  if (pos + hlen > tail) throw FormatError("truncated checkpoint header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header: " + std::string(e.what()));
  }
  pos += hlen;

  LoadedCheckpoint out;
  UNetConfig cfg = unet_config_from_json(header.at("config"));
  if (expected) {
    if (cfg.num_classes != expected->num_classes) {
      throw ValidationError("checkpoint " + path.string() + " has " + std::to_string(cfg.num_classes) +
                            " classes, expected " + std::to_string(expected->num_classes));
    }
    if (cfg.in_channels != expected->in_channels || cfg.patch_shape != expected->patch_shape) {
      throw ValidationError("checkpoint " + path.string() + ": input channels or patch shape mismatch");
    }
  }
  out.info.seed = header.value("seed", std::uint64_t{0});
  out.info.epoch = header.value("epoch", 0);
  out.info.split_id = header.value("split_id", std::string{});
  auto net = build_network(cfg, out.info.seed);
  auto params = net->params();
  const auto& plist = header.at("params");
  if (plist.size() != params.size()) throw FormatError("checkpoint parameter list does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (plist[i].at("name").get<std::string>() != params[i]->name ||
        plist[i].at("size").get<std::size_t>() != params[i]->size()) {
      throw FormatError("checkpoint parameter '" + params[i]->name + "' does not match config");
    }
    const std::size_t bytes = params[i]->size() * sizeof(float);
    if (pos + bytes > tail) throw FormatError("truncated checkpoint data: " + path.string());
    std::memcpy(params[i]->value.data(), buf.data() + pos, bytes);
    pos += bytes;
  }
  if (pos != tail) throw FormatError("trailing bytes in checkpoint: " + path.string());
  out.network = std::move(net);
  return out;
}

}  // namespace labelseg
