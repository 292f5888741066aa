#include "repfuse/models.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "repfuse/error.hpp"

namespace repfuse {

namespace {

std::string join_dims(const std::vector<std::size_t>& v, char sep) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? std::string(1, sep) : "") << v[i];
  return os.str();
}

std::vector<std::size_t> split_dims(const std::string& s, char sep) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size()) throw Error(ErrorKind::Parse, "not a dimension list: '" + s + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

void glorot(std::span<double> block, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : block) v = rng.uniform(-a, a);
}

class Mlp final : public Architecture {
 public:
  explicit Mlp(ModelSpec spec) : spec_(std::move(spec)) {
    sizes_.push_back(shape_size(spec_.input_shape));
    for (auto h : spec_.hidden) sizes_.push_back(h);
    sizes_.push_back(spec_.num_classes);
    auto layout = std::make_shared<Layout>();
    for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
      layout->push_back({"fc" + std::to_string(i) + ".weight", {sizes_[i], sizes_[i + 1]}});
      layout->push_back({"fc" + std::to_string(i) + ".bias", {sizes_[i + 1]}});
    }
    layout_ = std::move(layout);
  }

  const std::shared_ptr<const Layout>& layout() const override { return layout_; }
  const Shape& input_shape() const override { return spec_.input_shape; }
  std::size_t num_classes() const override { return spec_.num_classes; }
  std::string describe() const override { return spec_.describe(); }

  ad::Var logits(std::span<const ad::Var> params, const ad::Var& x) const override {
    const std::size_t n = batch_count(*this, x.shape());
    ad::Var h = ad::reshape(x, Shape{n, sizes_.front()});
    const std::size_t layers = sizes_.size() - 1;
    for (std::size_t i = 0; i < layers; ++i) {
      h = ad::bias_add(ad::matmul(h, params[2 * i]), params[2 * i + 1]);
      if (i + 1 < layers) h = ad::relu(h);
    }
    return h;
  }

  void initialize(GradVector& params, Rng& rng) const override {
    for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
      glorot(params.block(2 * i), sizes_[i], sizes_[i + 1], rng);
      auto b = params.block(2 * i + 1);
      std::fill(b.begin(), b.end(), 0.0);
    }
  }

 private:
  ModelSpec spec_;
  std::vector<std::size_t> sizes_;
  std::shared_ptr<const Layout> layout_;
};

// conv(C->c1, k, pad k/2) -> relu -> pool -> conv(c1->c2) -> relu -> pool ->
// flatten -> linear(M)
class Cnn final : public Architecture {
 public:
  explicit Cnn(ModelSpec spec) : spec_(std::move(spec)) {
    const auto& in = spec_.input_shape;
    height_ = in[0];
    width_ = in[1];
    channels_ = in[2];
    pad_ = spec_.kernel / 2;
    const std::size_t k = spec_.kernel;
    const std::size_t h1 = (height_ + 2 * pad_ - k + 1) / 2, w1 = (width_ + 2 * pad_ - k + 1) / 2;
    if (h1 + 2 * pad_ < k || w1 + 2 * pad_ < k) throw Error(ErrorKind::InvalidArgument, "cnn input too small");
    const std::size_t h2 = (h1 + 2 * pad_ - k + 1) / 2, w2 = (w1 + 2 * pad_ - k + 1) / 2;
    if (h2 == 0 || w2 == 0) throw Error(ErrorKind::InvalidArgument, "cnn input too small");
    flat_ = spec_.conv2_channels * h2 * w2;
    auto layout = std::make_shared<Layout>();
    layout->push_back({"conv1.weight", {spec_.conv1_channels, channels_, k, k}});
    layout->push_back({"conv1.bias", {spec_.conv1_channels}});
    layout->push_back({"conv2.weight", {spec_.conv2_channels, spec_.conv1_channels, k, k}});
    layout->push_back({"conv2.bias", {spec_.conv2_channels}});
    layout->push_back({"fc.weight", {flat_, spec_.num_classes}});
    layout->push_back({"fc.bias", {spec_.num_classes}});
    layout_ = std::move(layout);
  }

  const std::shared_ptr<const Layout>& layout() const override { return layout_; }
  const Shape& input_shape() const override { return spec_.input_shape; }
  std::size_t num_classes() const override { return spec_.num_classes; }
  std::string describe() const override { return spec_.describe(); }

  ad::Var logits(std::span<const ad::Var> params, const ad::Var& x) const override {
    const std::size_t n = batch_count(*this, x.shape());
    // Samples are stored H x W x C; convolutions run on N x C x H x W.
    ad::Var h = channels_ == 1 ? ad::reshape(x, Shape{n, 1, height_, width_})
                               : ad::permute(ad::reshape(x, Shape{n, height_, width_, channels_}), {0, 3, 1, 2});
    h = ad::max_pool2x2(ad::relu(ad::bias_add(ad::conv2d(h, params[0], pad_), params[1])));
    h = ad::max_pool2x2(ad::relu(ad::bias_add(ad::conv2d(h, params[2], pad_), params[3])));
    h = ad::reshape(h, Shape{n, flat_});
    return ad::bias_add(ad::matmul(h, params[4]), params[5]);
  }

  void initialize(GradVector& params, Rng& rng) const override {
    const std::size_t kk = spec_.kernel * spec_.kernel;
    glorot(params.block(0), channels_ * kk, spec_.conv1_channels * kk, rng);
    glorot(params.block(2), spec_.conv1_channels * kk, spec_.conv2_channels * kk, rng);
    glorot(params.block(4), flat_, spec_.num_classes, rng);
    for (std::size_t b : {1u, 3u, 5u}) {
      auto blk = params.block(b);
      std::fill(blk.begin(), blk.end(), 0.0);
    }
  }

 private:
  ModelSpec spec_;
  std::size_t height_ = 0, width_ = 0, channels_ = 0, pad_ = 0, flat_ = 0;
  std::shared_ptr<const Layout> layout_;
};

}  // namespace

void ModelSpec::validate() const {
  if (num_classes < 2) throw Error(ErrorKind::InvalidArgument, "model needs at least 2 classes");
  if (input_shape.empty()) throw Error(ErrorKind::InvalidArgument, "model input shape is empty");
  for (auto d : input_shape) {
    if (d == 0) throw Error(ErrorKind::InvalidArgument, "model input shape has a zero dimension");
  }
  if (kind == ModelKind::Mlp) {
    for (auto h : hidden) {
      if (h == 0) throw Error(ErrorKind::InvalidArgument, "mlp hidden widths must be positive");
    }
  } else {
    if (input_shape.size() != 3) {
      throw Error(ErrorKind::InvalidArgument, "cnn accepts only image-shaped input (H x W x C), got " +
                                                  shape_str(input_shape));
    }
    if (conv1_channels == 0 || conv2_channels == 0 || kernel == 0) {
      throw Error(ErrorKind::InvalidArgument, "cnn channel counts and kernel must be positive");
    }
  }
}

std::string ModelSpec::describe() const {
  std::ostringstream os;
  if (kind == ModelKind::Mlp) {
    os << "mlp in=" << join_dims(input_shape, 'x') << " hidden=" << join_dims(hidden, ',') << " classes=" << num_classes;
  } else {
    os << "cnn in=" << join_dims(input_shape, 'x') << " conv=" << conv1_channels << ',' << conv2_channels
       << " kernel=" << kernel << " classes=" << num_classes;
  }
  return os.str();
}

ModelSpec ModelSpec::parse(const std::string& text) {
  std::istringstream is(text);
  std::string kind;
  is >> kind;
  ModelSpec spec;
  if (kind == "mlp") {
    spec.kind = ModelKind::Mlp;
  } else if (kind == "cnn") {
    spec.kind = ModelKind::Cnn;
  } else {
    throw Error(ErrorKind::Parse, "unknown model kind '" + kind + "'");
  }
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Parse, "bad model token '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "in") {
      spec.input_shape = split_dims(val, 'x');
    } else if (key == "hidden") {
      spec.hidden = split_dims(val, ',');
    } else if (key == "classes") {
      auto v = split_dims(val, ',');
      if (v.size() != 1) throw Error(ErrorKind::Parse, "bad class count '" + val + "'");
      spec.num_classes = v[0];
    } else if (key == "conv") {
      auto v = split_dims(val, ',');
      if (v.size() != 2) throw Error(ErrorKind::Parse, "conv expects two channel counts");
      spec.conv1_channels = v[0];
      spec.conv2_channels = v[1];
    } else if (key == "kernel") {
      auto v = split_dims(val, ',');
      if (v.size() != 1) throw Error(ErrorKind::Parse, "bad kernel '" + val + "'");
      spec.kernel = v[0];
    } else {
      throw Error(ErrorKind::Parse, "unknown model key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

std::shared_ptr<const Architecture> make_architecture(const ModelSpec& spec) {
  spec.validate();
  if (spec.kind == ModelKind::Mlp) return std::make_shared<Mlp>(spec);
  return std::make_shared<Cnn>(spec);
}

ModelState init_params(const ModelSpec& spec, std::uint64_t seed) { return init_params(make_architecture(spec), seed); }

ModelState init_params(std::shared_ptr<const Architecture> arch, std::uint64_t seed) {
  GradVector params(arch->layout());
  Rng rng(derive_seed(seed, Stream::Init));
  arch->initialize(params, rng);
  return ModelState{std::move(arch), std::move(params)};
}

std::vector<ad::Var> param_vars(const GradVector& params) {
  std::vector<ad::Var> out;
  out.reserve(params.num_blocks());
  for (std::size_t i = 0; i < params.num_blocks(); ++i) out.push_back(ad::variable(params.block_tensor(i)));
  return out;
}

std::size_t batch_count(const Architecture& arch, const Shape& x_shape) {
  const Shape& in = arch.input_shape();
  if (x_shape == in) return 1;
  if (x_shape.size() == in.size() + 1 && std::equal(in.begin(), in.end(), x_shape.begin() + 1)) return x_shape[0];
  throw Error(ErrorKind::ShapeMismatch, "input " + shape_str(x_shape) + " does not match model input " + shape_str(in));
}

ad::Var loss(const Architecture& arch, std::span<const ad::Var> params, const ad::Var& x, std::span<const int> y) {
  const std::size_t n = batch_count(arch, x.shape());
  if (y.size() != n) {
    throw Error(ErrorKind::ShapeMismatch, std::to_string(y.size()) + " labels for " + std::to_string(n) + " samples");
  }
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= arch.num_classes()) {
      throw Error(ErrorKind::InvalidArgument, "label " + std::to_string(label) + " out of range [0," +
                                                  std::to_string(arch.num_classes()) + ")");
    }
  }
  if (params.size() != arch.layout()->size()) throw Error(ErrorKind::Layout, "parameter count does not match layout");
  auto labels = std::make_shared<const std::vector<int>>(y.begin(), y.end());
  return ad::softmax_cross_entropy(arch.logits(params, x), std::move(labels));
}

ad::Var loss(const ModelState& state, const Tensor& x, std::span<const int> y) {
  auto params = param_vars(state.params);
  return loss(*state.arch, params, ad::constant(x), y);
}

namespace {

GradVector gradient_of_chunk(const ModelState& state, const Tensor& x, std::span<const int> y) {
  auto params = param_vars(state.params);
  auto l = loss(*state.arch, params, ad::constant(x), y);
  auto grads = ad::grad(l, params);
  std::vector<Tensor> blocks;
  blocks.reserve(grads.size());
  for (auto& g : grads) blocks.push_back(g.value());
  return GradVector::from_tensors(state.params.layout_ptr(), blocks);
}

// Small chunks keep the convolution buffers cache-resident.
constexpr std::size_t kGradChunk = 8;

}  // namespace

GradVector param_gradient(const ModelState& state, const Tensor& x, std::span<const int> y) {
  const std::size_t n = batch_count(*state.arch, x.shape());
  if (n <= kGradChunk || x.shape().size() == state.arch->input_shape().size()) return gradient_of_chunk(state, x, y);
  if (y.size() != n) {
    throw Error(ErrorKind::ShapeMismatch, std::to_string(y.size()) + " labels for " + std::to_string(n) + " samples");
  }
  const std::size_t d = x.size() / n;
  GradVector total;
  for (std::size_t lo = 0; lo < n; lo += kGradChunk) {
    const std::size_t m = std::min(kGradChunk, n - lo);
    Shape shape = x.shape();
    shape[0] = m;
    auto src = x.data().subspan(lo * d, m * d);
    const Tensor part(std::move(shape), std::vector<double>(src.begin(), src.end()));
    GradVector g = gradient_of_chunk(state, part, y.subspan(lo, m));
    if (lo == 0) {
      total = std::move(g);
    } else {
      total += g;
    }
  }
  return total;
}

Tensor input_gradient(const ModelState& state, const Tensor& x, std::span<const int> y) {
  std::vector<ad::Var> params;
  for (std::size_t i = 0; i < state.params.num_blocks(); ++i) params.push_back(ad::constant(state.params.block_tensor(i)));
  auto xv = ad::variable(x);
  const ad::Var wrt[] = {xv};
  return ad::grad(loss(*state.arch, params, xv, y), wrt)[0].value();
}

Tensor predict_logits(const ModelState& state, const Tensor& x) {
  ad::NoGradGuard guard;
  std::vector<ad::Var> params;
  for (std::size_t i = 0; i < state.params.num_blocks(); ++i) params.push_back(ad::constant(state.params.block_tensor(i)));
  return state.arch->logits(params, ad::constant(x)).value();
}

// --- checkpoint ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_le(std::istream& is, int bytes, const std::filesystem::path& path) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw Error(ErrorKind::Truncated, "checkpoint " + path.string() + " ends early");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

std::string get_str(std::istream& is, const std::filesystem::path& path) {
  const auto n = static_cast<std::size_t>(get_le(is, 4, path));
  if (n > (1u << 20)) throw Error(ErrorKind::Parse, "checkpoint string too long in " + path.string());
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw Error(ErrorKind::Truncated, "checkpoint " + path.string() + " ends early");
  return s;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  put_u32(os, kFormatVersion);
  put_str(os, state.arch->describe());
  const auto& layout = state.params.layout();
  put_u32(os, static_cast<std::uint32_t>(layout.size()));
  for (const auto& d : layout) {
    put_str(os, d.name);
    put_u32(os, static_cast<std::uint32_t>(d.shape.size()));
    for (auto dim : d.shape) put_u64(os, dim);
  }
  for (double v : state.params.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (is.gcount() != sizeof magic) throw Error(ErrorKind::Truncated, "checkpoint " + path.string() + " ends early");
  if (!std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw Error(ErrorKind::BadMagic, path.string() + " is not a checkpoint");
  }
  const auto version = get_le(is, 4, path);
  if (version != kFormatVersion) {
    throw Error(ErrorKind::Parse, "unsupported checkpoint version " + std::to_string(version));
  }
  auto arch = make_architecture(ModelSpec::parse(get_str(is, path)));
  const auto blocks = get_le(is, 4, path);
  Layout layout;
  for (std::uint64_t b = 0; b < blocks; ++b) {
    ParamDesc d;
    d.name = get_str(is, path);
    const auto rank = get_le(is, 4, path);
    for (std::uint64_t r = 0; r < rank; ++r) d.shape.push_back(static_cast<std::size_t>(get_le(is, 8, path)));
    layout.push_back(std::move(d));
  }
  if (layout != *arch->layout()) throw Error(ErrorKind::Layout, "checkpoint layout does not match its architecture");
  GradVector params(arch->layout());
  for (double& v : params.values()) v = std::bit_cast<double>(get_le(is, 8, path));
  return ModelState{std::move(arch), std::move(params)};
}

}  // namespace repfuse
