#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qahfl/image.hpp"
#include "qahfl/rng.hpp"

namespace qahfl {

enum class LayerKind {
  Conv2d,        // stride 1, same padding, bias
  Relu,
  MaxPool2x2,    // stride 2, ceil mode
  GlobalAvgPool, // (C,H,W) -> (C)
  BatchNorm,     // per channel; batch stats in training, running stats in eval
  Dropout,       // inverted dropout, train only
  Dense,
  SkipSave,      // remember the current activation in a slot
  SkipAdd,       // add a remembered activation back in (residual join)
  SqueezeExcite, // channel gating: GAP -> dense -> relu -> dense -> sigmoid
  FeatureTap,    // identity; marks the activation exported as the feature vector
};

struct LayerDesc {
  LayerKind kind{};
  std::string name;
  int out_ch = 0;    // Conv2d filters / Dense width
  int kernel = 0;    // Conv2d kernel size
  double rate = 0.0; // Dropout keep-off probability
  int hidden = 0;    // SqueezeExcite bottleneck width
  int slot = 0;      // SkipSave/SkipAdd pairing id
};

struct ModelSpec {
  QualityTier tier = QualityTier::Low;
  int input_h = 28, input_w = 28, input_ch = 1;
  int n_classes = 10;
  int feature_dim = 0;  // width at the FeatureTap
  std::vector<LayerDesc> layers;

  int64_t param_count() const;
  int64_t buffer_count() const;  // batch norm running stats
};

// Resolved geometry of one layer inside a spec: shapes plus where its
// parameters and buffers live in the flat vectors.
struct LayerLayout {
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, out_h = 0, out_w = 0;
  int64_t param_offset = 0, param_count = 0;
  int64_t buffer_offset = 0, buffer_count = 0;
};

// Walks the spec once, validating shapes (skip joins must match, dense layers
// must be preceded by flat activations, exactly one FeatureTap when
// feature_dim > 0). Throws std::invalid_argument on inconsistency.
std::vector<LayerLayout> plan_layout(const ModelSpec& spec);

// A network instance: spec + flat parameter/buffer storage + the forward and
// backward passes. T is float for real runs and double for gradient checks.
template <typename T>
class Net {
 public:
  explicit Net(const ModelSpec& spec);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<LayerLayout>& layout() const { return layout_; }

  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::vector<T>& buffers() { return buffers_; }
  const std::vector<T>& buffers() const { return buffers_; }

  // He-normal weights, zero biases, identity batch norm.
  void init_params(Rng& rng);

  // Saved activations and per-layer state from one training-mode forward.
  struct Flow {
    int batch = 0;
    std::vector<std::vector<T>> acts;      // acts[i] feeds layer i; back() is logits
    std::vector<std::vector<int>> argmax;  // MaxPool winners
    std::vector<std::vector<T>> aux;       // BN batch stats / dropout masks / SE internals
  };

  // Runs the batch (x is batch * input volume, row-major). Fills logits
  // (batch * n_classes) and optionally the feature tap output. `train`
  // selects batch-stat BN plus dropout; drop_rng must be non-null iff the
  // spec has dropout and train is true. A non-null flow enables backward.
  // update_buffers lets gradient checks rerun forward without moving the
  // BN running averages.
  void forward(const T* x, int batch, bool train, Rng* drop_rng, Flow* flow,
               std::vector<T>* logits, std::vector<T>* features = nullptr,
               bool update_buffers = true);

  // Replaces the batch-norm running statistics with exact population moments
  // measured over the given examples (batch * input volume, row-major) under
  // the current parameters: one sweep in batch-stat mode with dropout off.
  // After heavy training on only a handful of batches the exponential running
  // average still reflects long-dead parameter regimes, so anything serving
  // eval-mode forwards should refresh first. No-op when the spec has no
  // batch norm.
  void refresh_stats(const T* xs, int n, int batch_size);

  // Backpropagates dlogits through the flow; adds parameter gradients into
  // *grad (sized param_count, caller zeroes it).
  void backward(const Flow& flow, const std::vector<T>& dlogits, std::vector<T>* grad);

 private:
  void forward_impl(const T* x, int batch, bool train, Rng* drop_rng, Flow* flow,
                    std::vector<T>* logits, std::vector<T>* features, bool update_buffers,
                    std::vector<T>* refresh_acc);

  ModelSpec spec_;
  std::vector<LayerLayout> layout_;
  std::vector<T> params_, buffers_;
  std::vector<T> scratch_cols_;  // im2col buffer reused across layers
};

// Mean cross entropy over the batch from raw logits; numerically stable.
// When dlogits is non-null it receives (softmax - onehot) / batch.
template <typename T>
T softmax_ce(const std::vector<T>& logits, int batch, int n_classes, const int* labels,
             std::vector<T>* dlogits);

// Proximal and weight-decay penalties used by local training:
//   (mu/2) ||p - prev||^2   and   lambda ||p||^2.
template <typename T>
T fedprox_penalty(const std::vector<T>& params, const std::vector<T>& prev, T mu);
template <typename T>
T l2_penalty(const std::vector<T>& params, T lambda);

// Full local objective: cross entropy + proximal term + weight decay.
template <typename T>
T loss_fedprox(const std::vector<T>& logits, int batch, int n_classes, const int* labels,
               const std::vector<T>& params, const std::vector<T>& prev, T mu, T lambda);

// Adds d/dp of the two penalties (mu (p - prev) + 2 lambda p) into *grad.
template <typename T>
void add_penalty_grads(const std::vector<T>& params, const std::vector<T>& prev, T mu, T lambda,
                       std::vector<T>* grad);

// Classical momentum: v = momentum v + g; p -= lr v.
template <typename T>
void sgd_momentum_step(std::vector<T>& params, const std::vector<T>& grad,
                       std::vector<T>& velocity, T lr, T momentum);

}  // namespace qahfl
