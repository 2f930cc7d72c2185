#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <vector>

#include "sam/errors.hpp"
#include "sam/rng.hpp"

namespace sam {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

enum class Act { kRelu, kTanh };
enum class OutAct { kIdentity, kTanh, kSigmoid };

// Architecture of a dense feed-forward network. Layer normalization is a
// per-hidden-layer flag and never applies to the output layer.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;
  Act hidden_act = Act::kRelu;
  OutAct out_act = OutAct::kIdentity;
  std::vector<bool> layer_norm;

  static MlpSpec make(int in, std::vector<int> hidden_sizes, int out,
                      Act act, OutAct out_act, bool ln_all) {
    MlpSpec s;
    s.input_dim = in;
    s.hidden = std::move(hidden_sizes);
    s.output_dim = out;
    s.hidden_act = act;
    s.out_act = out_act;
    s.layer_norm.assign(s.hidden.size(), ln_all);
    return s;
  }

  void validate() const;
  bool operator==(const MlpSpec&) const = default;
};

enum class TensorRole { kWeight, kBias, kLnGain, kLnBias };

struct Segment {
  int layer;  // 0..H-1 hidden, H = output layer
  TensorRole role;
  int rows = 0, cols = 0;  // cols == 1 for vectors
  int offset = 0, size = 0;
};

// Fixed mapping from (layer, tensor role) to index ranges of the flat
// parameter vector. Shared by every network and gradient built from the
// same spec.
class MlpLayout {
 public:
  explicit MlpLayout(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  int total() const { return total_; }
  int n_hidden() const { return static_cast<int>(spec_.hidden.size()); }
  const std::vector<Segment>& segments() const { return segments_; }

  const Segment& weight(int layer) const { return segments_[w_idx_[layer]]; }
  const Segment& bias(int layer) const { return segments_[b_idx_[layer]]; }
  bool has_ln(int layer) const {
    return layer < n_hidden() && spec_.layer_norm[layer];
  }
  const Segment& ln_gain(int layer) const { return segments_[g_idx_[layer]]; }
  const Segment& ln_bias(int layer) const { return segments_[c_idx_[layer]]; }

  // 1 for coordinates that receive parameter-space noise, 0 for the
  // layer-norm gain/bias coordinates.
  const VectorXd& noise_mask() const { return noise_mask_; }

 private:
  MlpSpec spec_;
  std::vector<Segment> segments_;
  std::vector<int> w_idx_, b_idx_, g_idx_, c_idx_;
  int total_ = 0;
  VectorXd noise_mask_;
};

using LayoutPtr = std::shared_ptr<const MlpLayout>;

LayoutPtr make_layout(const MlpSpec& spec);

// Flat view of all parameters of one network.
struct ParamVector {
  VectorXd values;
  LayoutPtr layout;

  int size() const { return static_cast<int>(values.size()); }
  bool same_layout(const ParamVector& o) const {
    return layout == o.layout ||
           (layout && o.layout && layout->spec() == o.layout->spec());
  }
};

ParamVector zeros_like(const LayoutPtr& layout);

class MlpNet {
 public:
  explicit MlpNet(LayoutPtr layout)
      : layout_(std::move(layout)), theta_(VectorXd::Zero(layout_->total())) {}

  // Hidden and output weights/biases uniform in +-1/sqrt(fan_in); a positive
  // final_scale overrides the output layer with +-final_scale. Layer-norm
  // gains start at 1, biases at 0.
  static MlpNet init(const MlpSpec& spec, Rng& rng, double final_scale = 0.0);

  const MlpSpec& spec() const { return layout_->spec(); }
  const LayoutPtr& layout() const { return layout_; }
  int n_hidden() const { return layout_->n_hidden(); }
  std::uint64_t version() const { return version_; }

  Eigen::Map<const MatrixXd> weight(int l) const {
    const Segment& s = layout_->weight(l);
    return {theta_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const VectorXd> bias(int l) const {
    const Segment& s = layout_->bias(l);
    return {theta_.data() + s.offset, s.rows};
  }
  Eigen::Map<const VectorXd> ln_gain(int l) const {
    const Segment& s = layout_->ln_gain(l);
    return {theta_.data() + s.offset, s.rows};
  }
  Eigen::Map<const VectorXd> ln_bias(int l) const {
    const Segment& s = layout_->ln_bias(l);
    return {theta_.data() + s.offset, s.rows};
  }

  const VectorXd& params() const { return theta_; }
  // Any mutation goes through here so caches can detect staleness.
  VectorXd& params_mut() {
    ++version_;
    return theta_;
  }

  ParamVector params_copy() const { return {theta_, layout_}; }
  void set_params(const ParamVector& p);

 private:
  LayoutPtr layout_;
  VectorXd theta_;
  std::uint64_t version_ = 0;
};

// Activation record of one forward pass over a batch (samples as columns).
struct LayerCache {
  MatrixXd z;       // pre-activation, before layer norm
  MatrixXd xhat;    // layer-norm normalized values (empty when no LN)
  RowVectorXd s;    // layer-norm std per sample
  MatrixXd u;       // post-LN pre-activation (== z when no LN)
  MatrixXd h;       // layer output
};

struct ForwardCache {
  MatrixXd input;
  std::vector<LayerCache> layers;
  MatrixXd z_out;
  MatrixXd output;
  const MlpLayout* layout = nullptr;
  std::uint64_t net_version = 0;
  int batch() const { return static_cast<int>(input.cols()); }
};

constexpr double kLayerNormEps = 1e-6;

// Batched forward pass; columns are samples. Deterministic.
MatrixXd forward_batch(const MlpNet& net, const Eigen::Ref<const MatrixXd>& X,
                       ForwardCache& cache);
MatrixXd predict_batch(const MlpNet& net, const Eigen::Ref<const MatrixXd>& X);

VectorXd predict(const MlpNet& net, const Eigen::Ref<const VectorXd>& x);

// Exact analytic derivatives of sum_j out_grad_j . output_j with respect to
// parameters (accumulated into param_grad, summed over columns) and inputs
// (written to input_grad when non-null, one column per sample).
void backward_batch(const MlpNet& net, const ForwardCache& cache,
                    const Eigen::Ref<const MatrixXd>& out_grad,
                    ParamVector& param_grad, MatrixXd* input_grad = nullptr);

// Single-sample convenience wrapper.
void backward(const MlpNet& net, const ForwardCache& cache,
              const Eigen::Ref<const VectorXd>& out_grad,
              ParamVector& param_grad, VectorXd* input_grad = nullptr);

// Scalar-output networks: f(x_j) and grad_x f(x_j) for every column.
struct InputGradBatch {
  VectorXd value;       // f per sample
  MatrixXd input_grad;  // one column per sample
};
InputGradBatch input_gradient_batch(const MlpNet& net,
                                    const Eigen::Ref<const MatrixXd>& X);

// Scalar-output networks: parameter gradient of sum_j v_j . grad_x f(x_j),
// computed by a forward-over-reverse sweep (exact second-order chain).
// Used by penalties on the input gradient.
ParamVector mixed_grad_batch(const MlpNet& net,
                             const Eigen::Ref<const MatrixXd>& X,
                             const Eigen::Ref<const MatrixXd>& V);

}  // namespace sam
