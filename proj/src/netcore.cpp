#include "usrn/netcore.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "usrn/binary_io.hpp"
#include "usrn/error.hpp"

namespace usrn {

namespace {

constexpr std::string_view kParamsMagic = "USRNPM1";

AffineLayer glorot_layer(int in, int out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-a, a);
  AffineLayer layer;
  layer.weight.resize(out, in);
  for (int r = 0; r < out; ++r)
    for (int c = 0; c < in; ++c) layer.weight(r, c) = dist(rng);
  layer.bias = Vector::Zero(out);
  return layer;
}

ShareMode share_from_layer_count(std::size_t n) {
  switch (n) {
    case 4: return ShareMode::all;
    case 5: return ShareMode::low;
    case 6: return ShareMode::none;
    default: throw DataError("model must have 4, 5 or 6 layers, got " + std::to_string(n));
  }
}

Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

Matrix affine(const Matrix& x, const AffineLayer& layer) {
  Matrix z = x * layer.weight.transpose();
  z.rowwise() += layer.bias.transpose();
  return z;
}

}  // namespace

std::string to_string(ShareMode mode) {
  switch (mode) {
    case ShareMode::none: return "none";
    case ShareMode::low: return "low";
    case ShareMode::all: return "all";
  }
  return "low";
}

ShareMode share_mode_from_string(const std::string& s) {
  if (s == "none") return ShareMode::none;
  if (s == "low") return ShareMode::low;
  if (s == "all") return ShareMode::all;
  throw ConfigError("unknown share_mode '" + s + "' (expected none, low or all)");
}

std::span<const int> ModelParams::path_for(ShareMode mode, Head head) {
  static constexpr std::array<int, 3> kAllCls{0, 1, 2}, kAllSub{0, 1, 3};
  static constexpr std::array<int, 3> kLowCls{0, 1, 3}, kLowSub{0, 2, 4};
  static constexpr std::array<int, 3> kNoneCls{0, 1, 4}, kNoneSub{2, 3, 5};
  const bool cls = head == Head::cls;
  switch (mode) {
    case ShareMode::all: return cls ? kAllCls : kAllSub;
    case ShareMode::low: return cls ? kLowCls : kLowSub;
    case ShareMode::none: return cls ? kNoneCls : kNoneSub;
  }
  return kLowCls;
}

std::span<const int> ModelParams::path(Head head) const { return path_for(share_, head); }

std::vector<int> ModelParams::exclusive_layers(Head head) const {
  const Head other = head == Head::cls ? Head::sub : Head::cls;
  std::vector<int> out;
  for (int i : path(head))
    if (std::find(path(other).begin(), path(other).end(), i) == path(other).end()) out.push_back(i);
  return out;
}

ModelParams ModelParams::initialize(const NetworkShape& shape, std::uint64_t seed) {
  if (shape.input_dim < 1 || shape.hidden_dim < 1 || shape.num_classes < 1 || shape.num_subclasses < 1)
    throw ConfigError("network dimensions must be positive");
  std::mt19937_64 rng(seed);
  const int d = shape.input_dim, h = shape.hidden_dim;
  std::vector<AffineLayer> layers;
  switch (shape.share) {
    case ShareMode::all:
      layers.push_back(glorot_layer(d, h, rng));
      layers.push_back(glorot_layer(h, h, rng));
      break;
    case ShareMode::low:
      layers.push_back(glorot_layer(d, h, rng));
      layers.push_back(glorot_layer(h, h, rng));
      layers.push_back(glorot_layer(h, h, rng));
      break;
    case ShareMode::none:
      layers.push_back(glorot_layer(d, h, rng));
      layers.push_back(glorot_layer(h, h, rng));
      layers.push_back(glorot_layer(d, h, rng));
      layers.push_back(glorot_layer(h, h, rng));
      break;
  }
  layers.push_back(glorot_layer(h, shape.num_classes, rng));
  layers.push_back(glorot_layer(h, shape.num_subclasses, rng));
  return from_layers(std::move(layers));
}

ModelParams ModelParams::from_layers(std::vector<AffineLayer> layers) {
  ModelParams p;
  p.share_ = share_from_layer_count(layers.size());
  p.layers_ = std::move(layers);
  for (Head head : {Head::cls, Head::sub}) {
    auto path = p.path(head);
    for (int i = 0; i < 3; ++i) {
      const auto& l = p.layer(path[static_cast<std::size_t>(i)]);
      if (l.bias.size() != l.weight.rows()) throw DataError("bias length does not match layer outputs");
      if (i > 0 && l.inputs() != p.layer(path[static_cast<std::size_t>(i - 1)]).outputs())
        throw DataError("layer dimensions do not chain");
    }
  }
  if (p.layer(p.path(Head::cls)[0]).inputs() != p.layer(p.path(Head::sub)[0]).inputs())
    throw DataError("class and subclass paths disagree on input dimension");
  return p;
}

void ModelParams::reset_head(Head head, int outputs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto& l = layer(head_layer(head));
  const bool trainable = l.trainable;
  l = glorot_layer(l.inputs(), outputs, rng);
  l.trainable = trainable;
}

void ModelParams::copy_class_trunk_to_sub() {
  const auto cls = path(Head::cls);
  const auto sub = path(Head::sub);
  for (int i = 0; i < 2; ++i)
    if (cls[static_cast<std::size_t>(i)] != sub[static_cast<std::size_t>(i)])
      layer(sub[static_cast<std::size_t>(i)]) = layer(cls[static_cast<std::size_t>(i)]);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool ModelParams::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(),
                     [](const AffineLayer& l) { return l.weight.allFinite() && l.bias.allFinite(); });
}

GradientSet GradientSet::zeros_like(const ModelParams& params) {
  GradientSet g;
  for (const auto& l : params.layers())
    g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  return g;
}

GradientSet& GradientSet::operator+=(const GradientSet& other) {
  if (layers.size() != other.layers.size()) throw ConfigError("adding incongruent gradient sets");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += other.layers[i].weight;
    layers[i].bias += other.layers[i].bias;
  }
  return *this;
}

GradientSet& GradientSet::operator*=(double s) {
  for (auto& l : layers) {
    l.weight *= s;
    l.bias *= s;
  }
  return *this;
}

bool GradientSet::all_finite() const {
  return std::all_of(layers.begin(), layers.end(),
                     [](const LayerGradient& l) { return l.weight.allFinite() && l.bias.allFinite(); });
}

double GradientSet::max_abs() const {
  double m = 0.0;
  for (const auto& l : layers) {
    if (l.weight.size()) m = std::max(m, l.weight.cwiseAbs().maxCoeff());
    if (l.bias.size()) m = std::max(m, l.bias.cwiseAbs().maxCoeff());
  }
  return m;
}

bool GradientSet::congruent_with(const ModelParams& params) const {
  if (layers.size() != params.layers().size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& p = params.layers()[i];
    if (layers[i].weight.rows() != p.weight.rows() || layers[i].weight.cols() != p.weight.cols() ||
        layers[i].bias.size() != p.bias.size())
      return false;
  }
  return true;
}

ForwardPass forward_pass(const ModelParams& params, const Matrix& input, Head head) {
  const auto path = params.path(head);
  if (input.cols() != params.input_dim())
    throw ConfigError("input has " + std::to_string(input.cols()) + " channels, model expects " +
                      std::to_string(params.input_dim()));
  ForwardPass fp;
  fp.input = input;
  fp.hidden1 = relu(affine(input, params.layer(path[0])));
  fp.hidden2 = relu(affine(fp.hidden1, params.layer(path[1])));
  fp.probs = softmax_rows(affine(fp.hidden2, params.layer(path[2])));
  return fp;
}

ProbGrid forward(const ModelParams& params, const FeatureGrid& input, Head head) {
  ForwardPass fp = forward_pass(params, input.values, head);
  return ProbGrid{input.height, input.width, std::move(fp.probs)};
}

Matrix trunk_features(const ModelParams& params, const FeatureGrid& input, Head head) {
  return forward_pass(params, input.values, head).hidden2;
}

CrossEntropy cross_entropy(const ProbGrid& pred, const LabelGrid& target) {
  if (pred.height != target.height || pred.width != target.width)
    throw DataError("prediction and target geometry differ");
  if (target.num_labels != pred.classes())
    throw DataError("target label space (" + std::to_string(target.num_labels) +
                    ") differs from prediction classes (" + std::to_string(pred.classes()) + ")");
  target.validate();
  CrossEntropy out;
  double sum = 0.0;
  for (int p = 0; p < target.pixels(); ++p) {
    if (target.is_ignored(p)) continue;
    sum -= std::log(std::max(pred.probs(p, target.at(p)), kLogFloor));
    ++out.counted;
  }
  out.empty = out.counted == 0;
  out.loss = out.empty ? 0.0 : sum / out.counted;
  return out;
}

TermValue cross_entropy_term(const ModelParams& params, const FeatureGrid& input,
                             const LabelGrid& target, Head head, double weight) {
  ForwardPass fp = forward_pass(params, input.values, head);
  TermValue out;
  out.ce = cross_entropy(ProbGrid{input.height, input.width, fp.probs}, target);
  out.grad = GradientSet::zeros_like(params);
  if (out.ce.empty || weight == 0.0) return out;

  // d(loss)/d(logits) = weight / n * (p - onehot) on counted pixels.
  Matrix dz = fp.probs;
  const double scale = weight / out.ce.counted;
  for (int p = 0; p < target.pixels(); ++p) {
    if (target.is_ignored(p)) {
      dz.row(p).setZero();
    } else {
      dz(p, target.at(p)) -= 1.0;
    }
  }
  dz *= scale;

  const auto path = params.path(head);
  const auto& head_layer = params.layer(path[2]);
  const auto& l2 = params.layer(path[1]);

  auto accumulate = [&](int idx, const Matrix& delta, const Matrix& activations) {
    if (!params.layer(idx).trainable) return;
    auto& g = out.grad.layers[static_cast<std::size_t>(idx)];
    g.weight += delta.transpose() * activations;
    g.bias += delta.colwise().sum().transpose();
  };

  accumulate(path[2], dz, fp.hidden2);
  Matrix d2 = (dz * head_layer.weight).cwiseProduct((fp.hidden2.array() > 0.0).cast<double>().matrix());
  accumulate(path[1], d2, fp.hidden1);
  Matrix d1 = (d2 * l2.weight).cwiseProduct((fp.hidden1.array() > 0.0).cast<double>().matrix());
  accumulate(path[0], d1, fp.input);
  return out;
}

GradientSet backward(const ModelParams& params, const FeatureGrid& input, const LabelGrid& target,
                     Head head, double weight) {
  return cross_entropy_term(params, input, target, head, weight).grad;
}

SgdOptimizer::SgdOptimizer(SgdOptions options) : options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (options_.momentum < 0.0 || options_.momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (options_.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
}

void SgdOptimizer::step(ModelParams& params, const GradientSet& grads) {
  if (!grads.congruent_with(params)) throw ConfigError("gradient set does not match model shape");
  if (!grads.all_finite()) throw NumericalError("non-finite gradient in optimizer step");
  if (!velocity_.congruent_with(params)) velocity_ = GradientSet::zeros_like(params);
  const double lr = options_.lr, mu = options_.momentum, wd = options_.weight_decay;
  for (std::size_t i = 0; i < params.layers().size(); ++i) {
    auto& layer = params.layers()[i];
    if (!layer.trainable) continue;
    auto& v = velocity_.layers[i];
    v.weight = mu * v.weight + grads.layers[i].weight;
    v.bias = mu * v.bias + grads.layers[i].bias;
    layer.weight -= lr * v.weight + (lr * wd) * layer.weight;
    layer.bias -= lr * v.bias + (lr * wd) * layer.bias;
  }
}

double gradient_check(const ModelParams& params,
                      const std::function<double(const ModelParams&)>& loss,
                      const GradientSet& analytic, double step) {
  if (!analytic.congruent_with(params)) throw ConfigError("gradient set does not match model shape");
  ModelParams probe = params;
  double worst = 0.0;
  auto check = [&](double& slot, double a) {
    const double saved = slot;
    slot = saved + step;
    const double up = loss(probe);
    slot = saved - step;
    const double down = loss(probe);
    slot = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  };
  for (std::size_t i = 0; i < probe.layers().size(); ++i) {
    auto& layer = probe.layers()[i];
    if (!layer.trainable) continue;
    const auto& g = analytic.layers[i];
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) check(layer.weight(r, c), g.weight(r, c));
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) check(layer.bias(r), g.bias(r));
  }
  return worst;
}

double grad_check(const ModelParams& params, const FeatureGrid& input, const LabelGrid& target,
                  Head head) {
  const GradientSet analytic = backward(params, input, target, head, 1.0);
  return gradient_check(
      params, [&](const ModelParams& p) { return cross_entropy(forward(p, input, head), target).loss; },
      analytic);
}

void write_params(std::ostream& os, const ModelParams& params) {
  io::write_magic(os, kParamsMagic);
  io::write_u32(os, static_cast<std::uint32_t>(params.layers().size()));
  for (const auto& l : params.layers()) {
    io::write_u32(os, static_cast<std::uint32_t>(l.weight.rows()));
    io::write_u32(os, static_cast<std::uint32_t>(l.weight.cols()));
  }
  for (const auto& l : params.layers()) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) io::write_f64(os, l.weight(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) io::write_f64(os, l.bias(r));
  }
}

ModelParams read_params(std::istream& is) {
  io::expect_magic(is, kParamsMagic);
  const std::uint32_t count = io::read_u32(is);
  if (count < 4 || count > 6) throw DataError("model must have 4, 5 or 6 layers");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rows = io::read_u32(is);
    const auto cols = io::read_u32(is);
    if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16)) throw DataError("implausible layer shape");
    shapes.emplace_back(rows, cols);
  }
  std::vector<AffineLayer> layers;
  for (auto [rows, cols] : shapes) {
    AffineLayer l;
    l.weight.resize(rows, cols);
    l.bias.resize(rows);
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = io::read_f64(is);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = io::read_f64(is);
    layers.push_back(std::move(l));
  }
  ModelParams p = ModelParams::from_layers(std::move(layers));
  if (!p.all_finite()) throw DataError("model parameters contain non-finite values");
  return p;
}

void save_params(const std::string& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_params(os, params);
}

ModelParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_params(is);
}

}  // namespace usrn
