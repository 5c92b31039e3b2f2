#include "higfa/models.hpp"

#include <Eigen/Dense>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "higfa/error.hpp"
#include "higfa/random.hpp"

namespace higfa::models {
namespace {

Tensor lecun(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return Tensor::randn({fan_in, fan_out}, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

Var bind(Tape& tape, const Tensor& p, bool track, std::vector<Var>* bound) {
  Var v;
  if (track) {
    Tensor copy = p;
    copy.set_requires_grad(true);
    v = tape.leaf(std::move(copy));
  } else {
    v = tape.constant(p);
  }
  if (bound) bound->push_back(v);
  return v;
}

const Tensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw Error("weights: missing tensor '" + name + "'");
}

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw Error("weights: truncated file");
  return v;
}

/// Plain SGD or Adam over a fixed parameter list.
class Stepper {
 public:
  Stepper(Optimizer kind, double lr, double weight_decay = 0.0) : kind_(kind), lr_(lr), wd_(weight_decay) {}

  void apply(const std::vector<std::pair<std::string, Tensor*>>& params, const std::vector<Var>& vars) {
    if (m_.empty()) {
      for (const auto& [name, p] : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    ++step_;
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k].second;
      const auto g = vars[k].grad();
      if (!g) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = (*g)[i] + wd_ * p[i];
        if (kind_ == Optimizer::sgd) {
          p[i] -= lr_ * gi;
        } else {
          m[i] = 0.9 * m[i] + 0.1 * gi;
          v[i] = 0.999 * v[i] + 0.001 * gi * gi;
          p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
        }
      }
    }
  }

 private:
  Optimizer kind_;
  double lr_;
  double wd_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

Tensor gather(const Tensor& rows, std::span<const std::size_t> idx) {
  const std::size_t cols = rows.dim(1);
  Tensor out({idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(rows.data() + idx[r] * cols, cols, out.data() + r * cols);
  }
  return out;
}

Tensor shift_rows(const Tensor& x, int max_shift, Rng& rng) {
  const std::size_t p = x.dim(1);
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p))));
  if (static_cast<std::size_t>(side * side) != p) throw ShapeError("shift augmentation needs square images");
  std::uniform_int_distribution<int> shift(-max_shift, max_shift);
  Tensor out(x.shape(), std::vector<double>(x.size(), -1.0));
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    const int dx = shift(rng), dy = shift(rng);
    for (int y = 0; y < side; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= side) continue;
      for (int xx = 0; xx < side; ++xx) {
        const int sx = xx - dx;
        if (sx < 0 || sx >= side) continue;
        out(r, static_cast<std::size_t>(y * side + xx)) = x(r, static_cast<std::size_t>(sy * side + sx));
      }
    }
  }
  return out;
}

}  // namespace

// --- weights I/O -----------------------------------------------------------

void write_weights(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write("HGFA", 4);
  put<std::uint32_t>(os, kWeightsVersion);
  for (const auto& t : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.value.data()),
             static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!os) throw Error("failed writing " + path.string());
}

std::vector<NamedTensor> read_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "HGFA", 4) != 0) throw Error(path.string() + ": bad magic, not a weight file");
  const auto version = get<std::uint32_t>(is);
  if (version != kWeightsVersion) throw Error(path.string() + ": unsupported version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = get<std::uint32_t>(is);
    nd::Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(is));
    std::vector<double> values(nd::element_count(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw Error(path.string() + ": truncated tensor '" + name + "'");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

// --- denoiser --------------------------------------------------------------

Tensor time_embedding(std::span<const int> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor out({t.size(), dim});
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out(r, i) = std::sin(t[r] * f);
      out(r, half + i) = std::cos(t[r] * f);
    }
  }
  return out;
}

Denoiser::Denoiser(const DenoiserConfig& c, std::uint64_t seed) : config_(c) {
  alpha_bars_ = diffusion::build_schedule(c.train_steps, c.beta_start, c.beta_end, 1).alpha_bars;
  Rng rng(seed);
  const std::size_t in = c.pixels() + c.time_dim + c.class_dim + c.style_dim;
  w_in_ = lecun(in, c.hidden, rng);
  b_in_ = Tensor({c.hidden});
  prompt_table_ = Tensor::randn({c.prompts + 1, c.class_dim}, rng);
  style_table_ = Tensor::randn({c.styles + 1, c.style_dim}, rng);
  w_h1_ = lecun(c.hidden, c.hidden, rng);
  b_h1_ = Tensor({c.hidden});
  w_h2_ = lecun(c.hidden, c.hidden, rng);
  b_h2_ = Tensor({c.hidden});
  w_out_ = lecun(c.hidden, c.pixels(), rng);
  b_out_ = Tensor({c.pixels()});
  w_ctl1_ = lecun(c.pixels(), c.hidden, rng);
  b_ctl1_ = Tensor({c.hidden});
  w_ctl2_ = Tensor::randn({c.hidden, c.hidden}, rng, 0.1 / std::sqrt(static_cast<double>(c.hidden)));
  w_skip_ = Tensor({c.pixels(), c.pixels()});
}

std::vector<std::pair<std::string, Tensor*>> Denoiser::parameters() {
  return {{"w_in", &w_in_},     {"b_in", &b_in_},     {"prompt_table", &prompt_table_},
          {"style_table", &style_table_},             {"w_h1", &w_h1_},
          {"b_h1", &b_h1_},     {"w_h2", &w_h2_},     {"b_h2", &b_h2_},
          {"w_out", &w_out_},   {"b_out", &b_out_},   {"w_ctl1", &w_ctl1_},
          {"b_ctl1", &b_ctl1_}, {"w_ctl2", &w_ctl2_}, {"w_skip", &w_skip_}};
}

Var Denoiser::forward(Tape& tape, const DenoiseBatch& batch, bool track, std::vector<Var>* bound) const {
  const auto& c = config_;
  const std::size_t n = batch.t.size();
  if (batch.x.rank() != 2 || batch.x.dim(0) != n || batch.x.dim(1) != c.pixels()) {
    throw ShapeError("denoise: x has shape " + nd::to_string(batch.x.shape()) + ", expected [" +
                     std::to_string(n) + ", " + std::to_string(c.pixels()) + "]");
  }
  if (batch.cond.size() != n) throw ShapeError("denoise: one conditioning per row required");
  if (batch.contour && batch.contour->shape() != batch.x.shape()) {
    throw ShapeError("denoise: contour shape " + nd::to_string(batch.contour->shape()) + " does not match x");
  }
  if (!batch.contour_scale.empty() && batch.contour_scale.size() != n) {
    throw ShapeError("denoise: one contour scale per row required");
  }

  std::vector<std::size_t> prompt_ids(n), style_ids(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& cond = batch.cond[r];
    if (cond.class_id && (*cond.class_id < 0 || static_cast<std::size_t>(*cond.class_id) >= c.prompts)) {
      throw Error("denoise: prompt id " + std::to_string(*cond.class_id) + " out of range");
    }
    if (cond.style_id && (*cond.style_id < 0 || static_cast<std::size_t>(*cond.style_id) >= c.styles)) {
      throw Error("denoise: style id " + std::to_string(*cond.style_id) + " out of range");
    }
    prompt_ids[r] = cond.class_id ? static_cast<std::size_t>(*cond.class_id) : c.prompts;
    style_ids[r] = cond.style_id ? static_cast<std::size_t>(*cond.style_id) : c.styles;
  }

  const Var w_in = bind(tape, w_in_, track, bound);
  const Var b_in = bind(tape, b_in_, track, bound);
  const Var prompts = bind(tape, prompt_table_, track, bound);
  const Var styles = bind(tape, style_table_, track, bound);
  const Var w_h1 = bind(tape, w_h1_, track, bound);
  const Var b_h1 = bind(tape, b_h1_, track, bound);
  const Var w_h2 = bind(tape, w_h2_, track, bound);
  const Var b_h2 = bind(tape, b_h2_, track, bound);
  const Var w_out = bind(tape, w_out_, track, bound);
  const Var b_out = bind(tape, b_out_, track, bound);
  const Var w_ctl1 = bind(tape, w_ctl1_, track, bound);
  const Var b_ctl1 = bind(tape, b_ctl1_, track, bound);
  const Var w_ctl2 = bind(tape, w_ctl2_, track, bound);
  const Var w_skip = bind(tape, w_skip_, track, bound);

  const Var x = tape.constant(batch.x);
  const Var temb = tape.constant(time_embedding(batch.t, c.time_dim));
  const Var input = nd::concat_cols(
      nd::concat_cols(nd::concat_cols(x, temb), nd::gather_rows(prompts, prompt_ids)),
      nd::gather_rows(styles, style_ids));
  Var pre = nd::add(nd::matmul(input, w_in), b_in);

  bool any_contour = false;
  if (batch.contour) {
    for (double s : batch.contour_scale) any_contour = any_contour || s != 0.0;
  }
  if (any_contour) {
    const Var edges = tape.constant(*batch.contour);
    const Var branch = nd::matmul(nd::tanh(nd::add(nd::matmul(edges, w_ctl1), b_ctl1)), w_ctl2);
    Tensor scales({n, c.hidden});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c.hidden; ++j) scales(r, j) = batch.contour_scale[r];
    pre = nd::add(pre, nd::mul(branch, tape.constant(std::move(scales))));
  }

  const Var h1 = nd::tanh(pre);
  const Var h2 = nd::tanh(nd::add(nd::matmul(h1, w_h1), b_h1));
  const Var h3 = nd::tanh(nd::add(nd::matmul(h2, w_h2), b_h2));
  const Var trunk = nd::add(nd::add(nd::matmul(h3, w_out), b_out), nd::matmul(x, w_skip));

  Tensor kx({n, c.pixels()}), kn({n, c.pixels()});
  const double sd2 = c.data_std * c.data_std;
  for (std::size_t r = 0; r < n; ++r) {
    if (batch.t[r] < 0 || batch.t[r] >= c.train_steps) {
      throw Error("denoise: timestep " + std::to_string(batch.t[r]) + " out of range");
    }
    const double ab = alpha_bars_[static_cast<std::size_t>(batch.t[r])];
    const double v = ab * sd2 + 1.0 - ab;
    std::fill_n(kx.data() + r * c.pixels(), c.pixels(), std::sqrt(1.0 - ab) / v);
    std::fill_n(kn.data() + r * c.pixels(), c.pixels(), std::sqrt(ab) * c.data_std / std::sqrt(v));
  }
  return nd::add(nd::mul(x, tape.constant(std::move(kx))), nd::mul(trunk, tape.constant(std::move(kn))));
}

Tensor Denoiser::predict(const DenoiseBatch& batch) const {
  Tape tape;
  return forward(tape, batch).value();
}

Tensor Denoiser::contour_residual(const Tensor& contour, double s_ctl) const {
  if (contour.size() != config_.pixels()) throw ShapeError("contour_residual: wrong edge-map size");
  Tape tape;
  const Var edges = tape.constant(contour.reshaped({1, config_.pixels()}));
  const Var branch = nd::matmul(
      nd::tanh(nd::add(nd::matmul(edges, tape.constant(w_ctl1_)), tape.constant(b_ctl1_))), tape.constant(w_ctl2_));
  return nd::scale(branch, s_ctl).value().reshaped({config_.hidden});
}

std::vector<NamedTensor> Denoiser::named_tensors() const {
  const auto& c = config_;
  std::vector<NamedTensor> out;
  out.push_back({"denoiser.config",
                 Tensor::vector({double(c.image_width), double(c.image_height), double(c.hidden), double(c.time_dim),
                                 double(c.class_dim), double(c.style_dim), double(c.prompts), double(c.styles),
                                 double(c.train_steps), c.beta_start, c.beta_end, c.data_std})});
  for (auto& [name, p] : const_cast<Denoiser*>(this)->parameters()) out.push_back({"denoiser." + name, *p});
  return out;
}

Denoiser Denoiser::from_tensors(std::span<const NamedTensor> tensors) {
  const Tensor& cfg = find_tensor(tensors, "denoiser.config");
  if (cfg.size() != 12) throw Error("weights: malformed denoiser.config");
  DenoiserConfig c;
  c.image_width = static_cast<std::size_t>(cfg[0]);
  c.image_height = static_cast<std::size_t>(cfg[1]);
  c.hidden = static_cast<std::size_t>(cfg[2]);
  c.time_dim = static_cast<std::size_t>(cfg[3]);
  c.class_dim = static_cast<std::size_t>(cfg[4]);
  c.style_dim = static_cast<std::size_t>(cfg[5]);
  c.prompts = static_cast<std::size_t>(cfg[6]);
  c.styles = static_cast<std::size_t>(cfg[7]);
  c.train_steps = static_cast<int>(cfg[8]);
  c.beta_start = cfg[9];
  c.beta_end = cfg[10];
  c.data_std = cfg[11];
  Denoiser d;
  d.config_ = c;
  d.alpha_bars_ = diffusion::build_schedule(c.train_steps, c.beta_start, c.beta_end, 1).alpha_bars;
  const Denoiser shape_ref(c, 0);
  auto ref = const_cast<Denoiser&>(shape_ref).parameters();
  auto mine = d.parameters();
  for (std::size_t i = 0; i < mine.size(); ++i) {
    const Tensor& t = find_tensor(tensors, "denoiser." + mine[i].first);
    if (t.shape() != ref[i].second->shape()) throw ShapeError("weights: denoiser." + mine[i].first + " has wrong shape");
    *mine[i].second = t;
  }
  return d;
}

void Denoiser::save(const std::filesystem::path& path) const { write_weights(path, named_tensors()); }

Denoiser Denoiser::load(const std::filesystem::path& path) { return from_tensors(read_weights(path)); }

Tensor denoise(const Denoiser& d, const Tensor& x_t, int t, const Conditioning& cond, const Tensor* contour,
               double s_ctl) {
  const std::size_t p = d.config().pixels();
  if (x_t.size() != p) {
    throw ShapeError("denoise: x_t has shape " + nd::to_string(x_t.shape()) + ", expected " + std::to_string(p) +
                     " pixels");
  }
  DenoiseBatch batch;
  batch.x = x_t.reshaped({1, p});
  batch.t = {t};
  batch.cond = {cond};
  if (contour && s_ctl != 0.0) {
    if (contour->size() != p) throw ShapeError("denoise: contour size does not match x_t");
    batch.contour = contour->reshaped({1, p});
    batch.contour_scale = {s_ctl};
  }
  return d.predict(batch).reshaped(x_t.shape());
}

// --- classifier ------------------------------------------------------------

Classifier::Classifier(const ClassifierConfig& c, std::uint64_t seed) : config_(c) {
  Rng rng(seed);
  w1_ = lecun(c.pixels, c.hidden1, rng);
  b1_ = Tensor({c.hidden1});
  w2_ = lecun(c.hidden1, c.hidden2, rng);
  b2_ = Tensor({c.hidden2});
  w3_ = lecun(c.hidden2, c.classes, rng);
  b3_ = Tensor({c.classes});
}

Classifier Classifier::zeros(const ClassifierConfig& c) {
  Classifier out(c, 0);
  for (auto& [name, p] : out.parameters()) {
    for (auto& v : p->values()) v = 0.0;
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Classifier::parameters() {
  return {{"w1", &w1_}, {"b1", &b1_}, {"w2", &w2_}, {"b2", &b2_}, {"w3", &w3_}, {"b3", &b3_}};
}

Var Classifier::log_probs(Tape& tape, const Var& images, bool track, std::vector<Var>* bound) const {
  const auto& shape = images.shape();
  if (shape.size() != 2 || shape[1] != config_.pixels) {
    throw ShapeError("classifier: input shape " + nd::to_string(shape) + ", expected [B, " +
                     std::to_string(config_.pixels) + "]");
  }
  const Var w1 = bind(tape, w1_, track, bound);
  const Var b1 = bind(tape, b1_, track, bound);
  const Var w2 = bind(tape, w2_, track, bound);
  const Var b2 = bind(tape, b2_, track, bound);
  const Var w3 = bind(tape, w3_, track, bound);
  const Var b3 = bind(tape, b3_, track, bound);
  const Var h1 = nd::tanh(nd::add(nd::matmul(images, w1), b1));
  const Var h2 = nd::tanh(nd::add(nd::matmul(h1, w2), b2));
  return nd::log_softmax(nd::add(nd::matmul(h2, w3), b3));
}

Tensor Classifier::probabilities(const Tensor& images) const {
  Tape tape;
  const Var lp = log_probs(tape, tape.constant(images));
  Tensor p = lp.value();
  // Exponentiate, then renormalise so each row sums to one to rounding.
  const std::size_t cols = p.dim(1);
  for (std::size_t r = 0; r < p.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (p(r, c) = std::exp(p(r, c)));
    for (std::size_t c = 0; c < cols; ++c) p(r, c) /= s;
  }
  return p;
}

std::vector<double> classify(const Classifier& c, const Tensor& image) {
  if (image.size() != c.config().pixels) {
    throw ShapeError("classify: image has " + std::to_string(image.size()) + " values, expected " +
                     std::to_string(c.config().pixels));
  }
  const Tensor p = c.probabilities(image.reshaped({1, c.config().pixels}));
  return {p.values().begin(), p.values().end()};
}

std::vector<NamedTensor> Classifier::named_tensors() const {
  const auto& c = config_;
  std::vector<NamedTensor> out;
  out.push_back({"classifier.config",
                 Tensor::vector({double(c.pixels), double(c.hidden1), double(c.hidden2), double(c.classes)})});
  for (auto& [name, p] : const_cast<Classifier*>(this)->parameters()) out.push_back({"classifier." + name, *p});
  return out;
}

Classifier Classifier::from_tensors(std::span<const NamedTensor> tensors) {
  const Tensor& cfg = find_tensor(tensors, "classifier.config");
  if (cfg.size() != 4) throw Error("weights: malformed classifier.config");
  ClassifierConfig c{static_cast<std::size_t>(cfg[0]), static_cast<std::size_t>(cfg[1]),
                     static_cast<std::size_t>(cfg[2]), static_cast<std::size_t>(cfg[3])};
  Classifier out = zeros(c);
  for (auto& [name, p] : out.parameters()) {
    const Tensor& t = find_tensor(tensors, "classifier." + name);
    if (t.shape() != p->shape()) throw ShapeError("weights: classifier." + name + " has wrong shape");
    *p = t;
  }
  return out;
}

void Classifier::save(const std::filesystem::path& path) const { write_weights(path, named_tensors()); }

Classifier Classifier::load(const std::filesystem::path& path) { return from_tensors(read_weights(path)); }

// --- decoder ---------------------------------------------------------------

Decoder Decoder::identity() { return Decoder{}; }

Decoder Decoder::linear(Tensor weight, Tensor bias) {
  if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(1)) {
    throw ShapeError("linear decoder: weight " + nd::to_string(weight.shape()) + " and bias " +
                     nd::to_string(bias.shape()) + " do not fit");
  }
  Decoder d;
  d.mode_ = DecoderMode::linear;
  d.weight_ = std::move(weight);
  d.bias_ = std::move(bias);
  return d;
}

Decoder Decoder::random_linear(std::size_t latent, std::size_t pixels, std::uint64_t seed, double spread) {
  Rng rng(seed);
  Tensor w = Tensor::randn({latent, pixels}, rng, spread / std::sqrt(static_cast<double>(latent)));
  for (std::size_t i = 0; i < std::min(latent, pixels); ++i) w(i, i) += 1.0;
  return linear(std::move(w), Tensor::randn({pixels}, rng, spread));
}

Decoder Decoder::fit_pca(const Tensor& images, std::size_t latent) {
  if (images.rank() != 2 || latent == 0 || latent > images.dim(1)) throw Error("fit_pca: bad latent size");
  const auto n = static_cast<Eigen::Index>(images.dim(0));
  const auto p = static_cast<Eigen::Index>(images.dim(1));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> x(images.data(), n, p);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const RowMat centered = x.rowwise() - mu;
  const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<Eigen::Index>(1, n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Tensor w({latent, images.dim(1)});
  for (std::size_t k = 0; k < latent; ++k) {
    // eigenvalues ascend; take the largest
    const auto col = p - 1 - static_cast<Eigen::Index>(k);
    for (Eigen::Index j = 0; j < p; ++j) w(k, static_cast<std::size_t>(j)) = eig.eigenvectors()(j, col);
  }
  Tensor b({images.dim(1)});
  for (Eigen::Index j = 0; j < p; ++j) b[static_cast<std::size_t>(j)] = mu(j);
  return linear(std::move(w), std::move(b));
}

Var Decoder::decode(Tape& tape, const Var& z) const {
  if (mode_ == DecoderMode::identity) return z;
  return nd::add(nd::matmul(z, tape.constant(weight_)), tape.constant(bias_));
}

Tensor Decoder::decode(const Tensor& z) const {
  if (mode_ == DecoderMode::identity) return z;
  Tape tape;
  return decode(tape, tape.constant(z)).value();
}

Tensor Decoder::encode(const Tensor& images) const {
  if (mode_ == DecoderMode::identity) return images;
  // Least-squares inverse for orthonormal rows (PCA): (x - b) W^T.
  Tape tape;
  const Var centered = nd::sub(tape.constant(images), tape.constant(bias_));
  Tensor wt({weight_.dim(1), weight_.dim(0)});
  for (std::size_t i = 0; i < weight_.dim(0); ++i)
    for (std::size_t j = 0; j < weight_.dim(1); ++j) wt(j, i) = weight_(i, j);
  return nd::matmul(centered, tape.constant(std::move(wt))).value();
}

std::vector<NamedTensor> Decoder::named_tensors() const {
  if (mode_ == DecoderMode::identity) return {{"decoder.mode", Tensor::scalar(0.0)}};
  return {{"decoder.mode", Tensor::scalar(1.0)}, {"decoder.weight", weight_}, {"decoder.bias", bias_}};
}

Decoder Decoder::from_tensors(std::span<const NamedTensor> tensors) {
  if (find_tensor(tensors, "decoder.mode").item() == 0.0) return identity();
  return linear(find_tensor(tensors, "decoder.weight"), find_tensor(tensors, "decoder.bias"));
}

// --- training --------------------------------------------------------------

DenoiserTrainResult train_denoiser(const DenoiserData& data, const diffusion::NoiseSchedule& schedule,
                                   const DenoiserConfig& config, double cond_drop_prob, const TrainOptions& opts) {
  if (!(cond_drop_prob >= 0.0 && cond_drop_prob <= 1.0)) throw Error("cond_drop_prob must be in [0, 1]");
  const std::size_t n = data.prompts.size();
  const std::size_t p = config.pixels();
  if (n == 0) throw Error("train_denoiser: empty dataset");
  if (data.images.shape() != nd::Shape{n, p} || data.contours.shape() != nd::Shape{n, p} || data.styles.size() != n) {
    throw ShapeError("train_denoiser: misaligned training data");
  }

  DenoiserConfig cfg = config;
  cfg.train_steps = schedule.train_steps;
  cfg.beta_start = schedule.betas.front();
  cfg.beta_end = schedule.betas.back();
  DenoiserTrainResult result{Denoiser(cfg, derive_seed(opts.seed, {1})), {}};
  auto params = result.model.parameters();
  Stepper stepper(opts.optimizer, opts.learning_rate);
  Rng rng = make_rng(opts.seed, {2});
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit;
  std::uniform_int_distribution<int> timestep(0, schedule.train_steps - 1);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = permutation(n, rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t end = std::min(n, start + opts.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const std::size_t b = idx.size();

      DenoiseBatch batch;
      const Tensor x0 = gather(data.images, idx);
      Tensor eps({b, p});
      for (auto& v : eps.values()) v = normal(rng);
      batch.x = Tensor({b, p});
      batch.t.resize(b);
      batch.cond.resize(b);
      batch.contour = gather(data.contours, idx);
      batch.contour_scale.resize(b);
      for (std::size_t r = 0; r < b; ++r) {
        const int t = timestep(rng);
        batch.t[r] = t;
        const double ab = schedule.alpha_bar(t);
        const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < p; ++j) batch.x(r, j) = sa * x0(r, j) + sb * eps(r, j);
        const bool drop_prompt = unit(rng) < cond_drop_prob;
        const bool drop_contour = unit(rng) < cond_drop_prob;
        batch.cond[r] = {data.prompts[idx[r]], data.styles[idx[r]]};
        if (drop_prompt) batch.cond[r] = batch.cond[r].without_prompt();
        batch.contour_scale[r] = drop_contour ? 0.0 : 1.0;
      }

      Tape tape;
      std::vector<Var> bound;
      const Var pred = result.model.forward(tape, batch, true, &bound);
      const Var diff = nd::sub(pred, tape.constant(eps));
      const Var loss = nd::mean(nd::mul(diff, diff));
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw Error("train_denoiser: non-finite loss in epoch " + std::to_string(epoch + 1));
      tape.backward(loss);
      stepper.apply(params, bound);
      total += lv;
      ++batches;
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return result;
}

ClassifierTrainResult train_classifier(const LabeledData& train, std::size_t classes,
                                       const ClassifierTrainOptions& opts, const LabeledData* heldout) {
  const std::size_t n = train.labels.size();
  if (train.images.rank() != 2 || train.images.dim(0) != n) throw ShapeError("train_classifier: misaligned data");
  std::vector<int> seen;
  for (int l : train.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) throw Error("train_classifier: label out of range");
    if (std::find(seen.begin(), seen.end(), l) == seen.end()) seen.push_back(l);
  }
  if (seen.size() < 2) throw Error("train_classifier: need at least two classes in the training data");

  const std::size_t p = train.images.dim(1);
  ClassifierTrainResult result{Classifier({p, opts.hidden1, opts.hidden2, classes}, derive_seed(opts.seed, {1})), {}, {}};
  auto params = result.model.parameters();
  Stepper stepper(opts.optimizer, opts.learning_rate, opts.weight_decay);
  Rng rng = make_rng(opts.seed, {2});
  std::normal_distribution<double> normal(0.0, opts.input_noise > 0.0 ? opts.input_noise : 1.0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = permutation(n, rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t end = std::min(n, start + opts.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor x = gather(train.images, idx);
      if (opts.shift_augment > 0) x = shift_rows(x, opts.shift_augment, rng);
      if (opts.input_noise > 0.0) {
        for (auto& v : x.values()) v += normal(rng);
      }
      std::vector<std::size_t> y(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) y[r] = static_cast<std::size_t>(train.labels[idx[r]]);

      Tape tape;
      std::vector<Var> bound;
      const Var lp = result.model.log_probs(tape, tape.constant(std::move(x)), true, &bound);
      const Var loss = nd::scale(nd::mean(nd::pick(lp, y)), -1.0);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw Error("train_classifier: non-finite loss in epoch " + std::to_string(epoch + 1));
      tape.backward(loss);
      stepper.apply(params, bound);
      total += lv;
      ++batches;
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  if (heldout) result.heldout_accuracy = accuracy(result.model, *heldout);
  return result;
}

double accuracy(const Classifier& c, const LabeledData& data) {
  if (data.labels.empty()) return 0.0;
  const Tensor p = c.probabilities(data.images);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < data.labels.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < p.dim(1); ++k) {
      if (p(r, k) > p(r, best)) best = k;
    }
    if (static_cast<int>(best) == data.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.labels.size());
}

}  // namespace higfa::models
