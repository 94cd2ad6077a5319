#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "usrn/grid.hpp"

namespace usrn {

/// How much of the feature trunk the class and subclass paths share.
enum class ShareMode { none, low, all };

enum class Head { cls, sub };

std::string to_string(ShareMode mode);
ShareMode share_mode_from_string(const std::string& s);

struct AffineLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  bool trainable = true;

  int inputs() const { return static_cast<int>(weight.cols()); }
  int outputs() const { return static_cast<int>(weight.rows()); }
};

struct NetworkShape {
  int input_dim = 8;
  int hidden_dim = 16;
  int num_classes = 5;
  int num_subclasses = 5;
  ShareMode share = ShareMode::low;
};

/// Two-layer ReLU trunk (1x1 receptive field) feeding a class head and a
/// subclass head. Layer storage order depends on the share mode:
///
///   all:  trunk1, trunk2, head_cls, head_sub
///   low:  trunk1, trunk2_cls, trunk2_sub, head_cls, head_sub
///   none: trunk1_cls, trunk2_cls, trunk1_sub, trunk2_sub, head_cls, head_sub
///
/// so the layer count alone identifies the share mode.
class ModelParams {
 public:
  ModelParams() = default;

  /// Glorot-uniform weights, zero biases.
  static ModelParams initialize(const NetworkShape& shape, std::uint64_t seed);
  /// Rebuilds a model from raw layers; the share mode is inferred from the count.
  static ModelParams from_layers(std::vector<AffineLayer> layers);

  ShareMode share_mode() const { return share_; }
  std::vector<AffineLayer>& layers() { return layers_; }
  const std::vector<AffineLayer>& layers() const { return layers_; }
  AffineLayer& layer(int i) { return layers_[static_cast<std::size_t>(i)]; }
  const AffineLayer& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }

  /// Layer indices traversed by a head: {trunk1, trunk2, head}.
  std::span<const int> path(Head head) const;
  int head_layer(Head head) const { return path(head)[2]; }
  /// Layer indices used by one head and not the other.
  std::vector<int> exclusive_layers(Head head) const;

  int input_dim() const { return layer(path(Head::cls)[0]).inputs(); }
  int hidden_dim() const { return layer(path(Head::cls)[1]).outputs(); }
  int outputs(Head head) const { return layer(head_layer(head)).outputs(); }

  /// Replaces a head with a freshly initialized one of the given width.
  void reset_head(Head head, int outputs, std::uint64_t seed);
  /// Copies the class-path trunk layers that the subclass path does not
  /// share into the subclass path.
  void copy_class_trunk_to_sub();

  std::size_t parameter_count() const;
  bool all_finite() const;

 private:
  static std::span<const int> path_for(ShareMode mode, Head head);

  ShareMode share_ = ShareMode::low;
  std::vector<AffineLayer> layers_;
};

struct LayerGradient {
  Matrix weight;
  Vector bias;
};

/// Partial derivatives congruent with a ModelParams.
struct GradientSet {
  std::vector<LayerGradient> layers;

  static GradientSet zeros_like(const ModelParams& params);
  GradientSet& operator+=(const GradientSet& other);
  GradientSet& operator*=(double s);
  bool all_finite() const;
  double max_abs() const;
  bool congruent_with(const ModelParams& params) const;
};

/// Per-pixel softmax head output.
ProbGrid forward(const ModelParams& params, const FeatureGrid& input, Head head);
/// Logits and cached activations; used by backward and feature extraction.
struct ForwardPass {
  Matrix input;
  Matrix hidden1;  // post-ReLU
  Matrix hidden2;  // post-ReLU, the last trunk activations
  Matrix probs;
};
ForwardPass forward_pass(const ModelParams& params, const Matrix& input, Head head);

/// Last-trunk activations for the given head's path, one row per pixel.
Matrix trunk_features(const ModelParams& params, const FeatureGrid& input, Head head);

struct CrossEntropy {
  double loss = 0.0;  // mean of -log p[target] over counted pixels
  int counted = 0;
  bool empty = true;  // every pixel ignored
};

/// Probability floor inside the log.
inline constexpr double kLogFloor = 1e-12;

CrossEntropy cross_entropy(const ProbGrid& pred, const LabelGrid& target);

/// Gradient of weight * cross_entropy(forward(params, input, head), target)
/// with respect to every trainable parameter. Frozen layers get zeros.
GradientSet backward(const ModelParams& params, const FeatureGrid& input, const LabelGrid& target,
                     Head head, double weight);

/// Loss value together with its gradient, sharing one forward pass.
struct TermValue {
  CrossEntropy ce;
  GradientSet grad;
};
TermValue cross_entropy_term(const ModelParams& params, const FeatureGrid& input,
                             const LabelGrid& target, Head head, double weight);

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Momentum SGD with decoupled weight decay:
///   v <- momentum * v + g
///   w <- w - lr * v - lr * weight_decay * w
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdOptions options = {});

  /// Throws NumericalError on non-finite gradients, before touching params.
  void step(ModelParams& params, const GradientSet& grads);
  void reset() { velocity_.layers.clear(); }
  const SgdOptions& options() const { return options_; }

 private:
  SgdOptions options_;
  GradientSet velocity_;
};

/// Max over trainable parameters of |analytic - numeric| /
/// max(|analytic|, |numeric|, 1e-8), numeric by central differences.
double gradient_check(const ModelParams& params,
                      const std::function<double(const ModelParams&)>& loss,
                      const GradientSet& analytic, double step = 1e-5);

/// gradient_check for a single cross-entropy term.
double grad_check(const ModelParams& params, const FeatureGrid& input, const LabelGrid& target,
                  Head head);

// Flat binary: "USRNPM1", u32 layer count, (u32 rows, u32 cols) per layer,
// then per layer the row-major weight followed by the bias, all f64 LE.
void write_params(std::ostream& os, const ModelParams& params);
ModelParams read_params(std::istream& is);
void save_params(const std::string& path, const ModelParams& params);
ModelParams load_params(const std::string& path);

}  // namespace usrn
