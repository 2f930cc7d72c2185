#include "sam/mlp.hpp"

#include <cmath>

namespace sam {

void MlpSpec::validate() const {
  if (input_dim < 1 || output_dim < 1)
    throw ContractViolation("MlpSpec: all dims must be >= 1");
  if (hidden.empty()) throw ContractViolation("MlpSpec: hidden_sizes empty");
  for (int w : hidden)
    if (w < 1) throw ContractViolation("MlpSpec: hidden width must be >= 1");
  if (layer_norm.size() != hidden.size())
    throw ContractViolation("MlpSpec: layer_norm flags must match hidden layers");
}

MlpLayout::MlpLayout(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const int H = static_cast<int>(spec_.hidden.size());
  w_idx_.assign(H + 1, -1);
  b_idx_.assign(H + 1, -1);
  g_idx_.assign(H, -1);
  c_idx_.assign(H, -1);

  int off = 0;
  auto add = [&](int layer, TensorRole role, int rows, int cols) {
    Segment s;
    s.layer = layer;
    s.role = role;
    s.rows = rows;
    s.cols = cols;
    s.offset = off;
    s.size = rows * cols;
    off += s.size;
    segments_.push_back(s);
    return static_cast<int>(segments_.size()) - 1;
  };

  int fan_in = spec_.input_dim;
  for (int l = 0; l < H; ++l) {
    const int w = spec_.hidden[l];
    w_idx_[l] = add(l, TensorRole::kWeight, w, fan_in);
    b_idx_[l] = add(l, TensorRole::kBias, w, 1);
    if (spec_.layer_norm[l]) {
      g_idx_[l] = add(l, TensorRole::kLnGain, w, 1);
      c_idx_[l] = add(l, TensorRole::kLnBias, w, 1);
    }
    fan_in = w;
  }
  w_idx_[H] = add(H, TensorRole::kWeight, spec_.output_dim, fan_in);
  b_idx_[H] = add(H, TensorRole::kBias, spec_.output_dim, 1);
  total_ = off;

  noise_mask_ = VectorXd::Ones(total_);
  for (const Segment& s : segments_)
    if (s.role == TensorRole::kLnGain || s.role == TensorRole::kLnBias)
      noise_mask_.segment(s.offset, s.size).setZero();
}

LayoutPtr make_layout(const MlpSpec& spec) {
  return std::make_shared<const MlpLayout>(spec);
}

ParamVector zeros_like(const LayoutPtr& layout) {
  return {VectorXd::Zero(layout->total()), layout};
}

MlpNet MlpNet::init(const MlpSpec& spec, Rng& rng, double final_scale) {
  MlpNet net(make_layout(spec));
  VectorXd& theta = net.params_mut();
  const MlpLayout& lay = *net.layout_;
  const int H = lay.n_hidden();
  for (const Segment& s : lay.segments()) {
    double bound;
    switch (s.role) {
      case TensorRole::kWeight:
      case TensorRole::kBias: {
        const int fan_in =
            s.layer == 0 ? spec.input_dim
                         : spec.hidden[static_cast<std::size_t>(s.layer) - 1];
        bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        if (s.layer == H && final_scale > 0.0) bound = final_scale;
        for (int i = 0; i < s.size; ++i)
          theta[s.offset + i] = rng.uniform(-bound, bound);
        break;
      }
      case TensorRole::kLnGain:
        theta.segment(s.offset, s.size).setOnes();
        break;
      case TensorRole::kLnBias:
        theta.segment(s.offset, s.size).setZero();
        break;
    }
  }
  return net;
}

void MlpNet::set_params(const ParamVector& p) {
  if (!p.layout || !(p.layout->spec() == spec()))
    throw ContractViolation("set_params: layout mismatch");
  if (p.values.size() != theta_.size())
    throw ContractViolation("set_params: size mismatch");
  params_mut() = p.values;
}

namespace {

void apply_act(Act a, const MatrixXd& u, MatrixXd& h) {
  if (a == Act::kRelu)
    h = u.cwiseMax(0.0);
  else
    h = u.array().tanh();
}

// d act / d u, expressed with u and h = act(u).
MatrixXd act_prime(Act a, const MatrixXd& u, const MatrixXd& h) {
  if (a == Act::kRelu)
    return (u.array() > 0.0).cast<double>();
  return 1.0 - h.array().square();
}

// d2 act / d u2. Zero almost everywhere for relu.
MatrixXd act_second(Act a, const MatrixXd& u, const MatrixXd& h) {
  if (a == Act::kRelu) return MatrixXd::Zero(u.rows(), u.cols());
  return -2.0 * h.array() * (1.0 - h.array().square());
}

MatrixXd out_apply(OutAct a, const MatrixXd& z) {
  switch (a) {
    case OutAct::kIdentity: return z;
    case OutAct::kTanh: return z.array().tanh();
    case OutAct::kSigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

MatrixXd out_prime(OutAct a, const MatrixXd& z, const MatrixXd& y) {
  switch (a) {
    case OutAct::kIdentity: return MatrixXd::Ones(z.rows(), z.cols());
    case OutAct::kTanh: return 1.0 - y.array().square();
    case OutAct::kSigmoid: return y.array() * (1.0 - y.array());
  }
  return MatrixXd::Ones(z.rows(), z.cols());
}

MatrixXd out_second(OutAct a, const MatrixXd& z, const MatrixXd& y) {
  switch (a) {
    case OutAct::kIdentity: return MatrixXd::Zero(z.rows(), z.cols());
    case OutAct::kTanh:
      return -2.0 * y.array() * (1.0 - y.array().square());
    case OutAct::kSigmoid:
      return y.array() * (1.0 - y.array()) * (1.0 - 2.0 * y.array());
  }
  return MatrixXd::Zero(z.rows(), z.cols());
}

// z_bar = (x_bar - mean(x_bar) - xhat * mean(x_bar .* xhat)) / s, per column.
MatrixXd ln_backward(const MatrixXd& xbar, const MatrixXd& xhat,
                     const RowVectorXd& s) {
  const double w = static_cast<double>(xbar.rows());
  RowVectorXd m1 = xbar.colwise().sum() / w;
  RowVectorXd m2 = (xbar.array() * xhat.array()).colwise().sum() / w;
  MatrixXd out =
      (xbar.array().rowwise() - m1.array()) -
      (xhat.array().rowwise() * m2.array());
  out.array().rowwise() /= s.array();
  return out;
}

}  // namespace

MatrixXd forward_batch(const MlpNet& net, const Eigen::Ref<const MatrixXd>& X,
                       ForwardCache& cache) {
  const MlpSpec& spec = net.spec();
  if (X.rows() != spec.input_dim)
    throw ContractViolation("forward: input dim mismatch");
  const int H = net.n_hidden();

  cache.input = X;
  cache.layers.assign(static_cast<std::size_t>(H), LayerCache{});
  cache.layout = net.layout().get();
  cache.net_version = net.version();

  const MatrixXd* prev = &cache.input;
  for (int l = 0; l < H; ++l) {
    LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    lc.z.noalias() = net.weight(l) * (*prev);
    lc.z.colwise() += net.bias(l);
    if (net.layout()->has_ln(l)) {
      const double w = static_cast<double>(lc.z.rows());
      RowVectorXd mu = lc.z.colwise().sum() / w;
      MatrixXd d = lc.z.rowwise() - mu;
      RowVectorXd var = d.colwise().squaredNorm() / w;
      lc.s = (var.array() + kLayerNormEps).sqrt();
      lc.xhat = d.array().rowwise() / lc.s.array();
      lc.u = lc.xhat.array().colwise() * net.ln_gain(l).array();
      lc.u.colwise() += net.ln_bias(l);
    } else {
      lc.u = lc.z;
    }
    apply_act(spec.hidden_act, lc.u, lc.h);
    prev = &lc.h;
  }
  cache.z_out.noalias() = net.weight(H) * (*prev);
  cache.z_out.colwise() += net.bias(H);
  cache.output = out_apply(spec.out_act, cache.z_out);
  return cache.output;
}

MatrixXd predict_batch(const MlpNet& net, const Eigen::Ref<const MatrixXd>& X) {
  ForwardCache cache;
  return forward_batch(net, X, cache);
}

VectorXd predict(const MlpNet& net, const Eigen::Ref<const VectorXd>& x) {
  ForwardCache cache;
  return forward_batch(net, x, cache).col(0);
}

void backward_batch(const MlpNet& net, const ForwardCache& cache,
                    const Eigen::Ref<const MatrixXd>& out_grad,
                    ParamVector& param_grad, MatrixXd* input_grad) {
  const MlpSpec& spec = net.spec();
  if (cache.layout != net.layout().get() || cache.net_version != net.version())
    throw ContractViolation("backward: cache is stale or from another net");
  if (out_grad.rows() != spec.output_dim || out_grad.cols() != cache.input.cols())
    throw ContractViolation("backward: out_grad shape mismatch");
  if (!param_grad.layout || !(param_grad.layout->spec() == spec))
    throw ContractViolation("backward: param_grad layout mismatch");

  const MlpLayout& lay = *net.layout();
  const int H = net.n_hidden();
  VectorXd& g = param_grad.values;
  auto wmap = [&](const Segment& s) {
    return Eigen::Map<MatrixXd>(g.data() + s.offset, s.rows, s.cols);
  };
  auto vmap = [&](const Segment& s) {
    return Eigen::Map<VectorXd>(g.data() + s.offset, s.rows);
  };

  MatrixXd delta =
      out_grad.array() * out_prime(spec.out_act, cache.z_out, cache.output).array();
  const MatrixXd& h_last = H > 0 ? cache.layers.back().h : cache.input;
  wmap(lay.weight(H)).noalias() += delta * h_last.transpose();
  vmap(lay.bias(H)) += delta.rowwise().sum();
  MatrixXd hbar = net.weight(H).transpose() * delta;

  for (int l = H - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
    MatrixXd ubar =
        hbar.array() * act_prime(spec.hidden_act, lc.u, lc.h).array();
    MatrixXd zbar;
    if (lay.has_ln(l)) {
      vmap(lay.ln_gain(l)) += (ubar.array() * lc.xhat.array()).rowwise().sum();
      vmap(lay.ln_bias(l)) += ubar.rowwise().sum();
      MatrixXd xbar = ubar.array().colwise() * net.ln_gain(l).array();
      zbar = ln_backward(xbar, lc.xhat, lc.s);
    } else {
      zbar = std::move(ubar);
    }
    const MatrixXd& h_prev =
        l > 0 ? cache.layers[static_cast<std::size_t>(l) - 1].h : cache.input;
    wmap(lay.weight(l)).noalias() += zbar * h_prev.transpose();
    vmap(lay.bias(l)) += zbar.rowwise().sum();
    if (l > 0 || input_grad != nullptr)
      hbar.noalias() = net.weight(l).transpose() * zbar;
  }
  if (input_grad != nullptr) *input_grad = hbar;
}

void backward(const MlpNet& net, const ForwardCache& cache,
              const Eigen::Ref<const VectorXd>& out_grad,
              ParamVector& param_grad, VectorXd* input_grad) {
  MatrixXd ig;
  backward_batch(net, cache, out_grad, param_grad,
                 input_grad != nullptr ? &ig : nullptr);
  if (input_grad != nullptr) *input_grad = ig.col(0);
}

InputGradBatch input_gradient_batch(const MlpNet& net,
                                    const Eigen::Ref<const MatrixXd>& X) {
  if (net.spec().output_dim != 1)
    throw ContractViolation("input_gradient: scalar-output network required");
  ForwardCache cache;
  forward_batch(net, X, cache);
  ParamVector pg = zeros_like(net.layout());
  MatrixXd ig;
  backward_batch(net, cache, MatrixXd::Ones(1, X.cols()), pg, &ig);
  return {cache.output.transpose().col(0), std::move(ig)};
}

// Forward-over-reverse: every quantity of the forward and reverse sweeps is
// paired with its directional derivative along input tangents V (parameter
// tangents are zero). The tangent of the parameter gradient is exactly
// d/dparams sum_j V_j . grad_x f(X_j).
ParamVector mixed_grad_batch(const MlpNet& net,
                             const Eigen::Ref<const MatrixXd>& X,
                             const Eigen::Ref<const MatrixXd>& V) {
  const MlpSpec& spec = net.spec();
  if (spec.output_dim != 1)
    throw ContractViolation("mixed_grad: scalar-output network required");
  if (V.rows() != X.rows() || V.cols() != X.cols())
    throw ContractViolation("mixed_grad: tangent shape mismatch");

  const MlpLayout& lay = *net.layout();
  const int H = net.n_hidden();
  const int B = static_cast<int>(X.cols());

  struct DualLayer {
    MatrixXd u, udot;      // post-LN pre-activation
    MatrixXd h, hdot;      // layer output
    MatrixXd xhat, xhatdot;
    RowVectorXd s, sdot;
  };
  std::vector<DualLayer> L(static_cast<std::size_t>(H));

  // forward sweep
  MatrixXd h = X, hdot = V;
  for (int l = 0; l < H; ++l) {
    DualLayer& dl = L[static_cast<std::size_t>(l)];
    MatrixXd z = net.weight(l) * h;
    z.colwise() += net.bias(l);
    MatrixXd zdot = net.weight(l) * hdot;
    if (lay.has_ln(l)) {
      const double w = static_cast<double>(z.rows());
      RowVectorXd mu = z.colwise().sum() / w;
      RowVectorXd mudot = zdot.colwise().sum() / w;
      MatrixXd d = z.rowwise() - mu;
      MatrixXd ddot = zdot.rowwise() - mudot;
      RowVectorXd var = d.colwise().squaredNorm() / w;
      RowVectorXd vardot = 2.0 * (d.array() * ddot.array()).colwise().sum() / w;
      dl.s = (var.array() + kLayerNormEps).sqrt();
      dl.sdot = vardot.array() / (2.0 * dl.s.array());
      dl.xhat = d.array().rowwise() / dl.s.array();
      dl.xhatdot =
          (ddot.array() - dl.xhat.array().rowwise() * dl.sdot.array())
              .rowwise() /
          dl.s.array();
      dl.u = dl.xhat.array().colwise() * net.ln_gain(l).array();
      dl.u.colwise() += net.ln_bias(l);
      dl.udot = dl.xhatdot.array().colwise() * net.ln_gain(l).array();
    } else {
      dl.u = std::move(z);
      dl.udot = std::move(zdot);
    }
    apply_act(spec.hidden_act, dl.u, dl.h);
    dl.hdot =
        act_prime(spec.hidden_act, dl.u, dl.h).array() * dl.udot.array();
    h = dl.h;
    hdot = dl.hdot;
  }
  MatrixXd z_out = net.weight(H) * h;
  z_out.colwise() += net.bias(H);
  MatrixXd z_out_dot = net.weight(H) * hdot;
  MatrixXd y = out_apply(spec.out_act, z_out);

  // reverse sweep, dual arithmetic; seed out_grad = 1 (tangent 0)
  ParamVector tangent = zeros_like(net.layout());
  VectorXd& g = tangent.values;
  auto wmap = [&](const Segment& s) {
    return Eigen::Map<MatrixXd>(g.data() + s.offset, s.rows, s.cols);
  };
  auto vmap = [&](const Segment& s) {
    return Eigen::Map<VectorXd>(g.data() + s.offset, s.rows);
  };

  MatrixXd delta = out_prime(spec.out_act, z_out, y);
  MatrixXd deltadot =
      out_second(spec.out_act, z_out, y).array() * z_out_dot.array();

  const MatrixXd& h_last = H > 0 ? L.back().h : X;
  const MatrixXd& hdot_last = H > 0 ? L.back().hdot : static_cast<const MatrixXd&>(V);
  wmap(lay.weight(H)).noalias() += deltadot * h_last.transpose();
  wmap(lay.weight(H)).noalias() += delta * hdot_last.transpose();
  vmap(lay.bias(H)) += deltadot.rowwise().sum();
  MatrixXd hbar = net.weight(H).transpose() * delta;
  MatrixXd hbardot = net.weight(H).transpose() * deltadot;

  for (int l = H - 1; l >= 0; --l) {
    const DualLayer& dl = L[static_cast<std::size_t>(l)];
    MatrixXd ap = act_prime(spec.hidden_act, dl.u, dl.h);
    MatrixXd as = act_second(spec.hidden_act, dl.u, dl.h);
    MatrixXd ubar = hbar.array() * ap.array();
    MatrixXd ubardot = hbardot.array() * ap.array() +
                       hbar.array() * as.array() * dl.udot.array();
    MatrixXd zbar, zbardot;
    if (lay.has_ln(l)) {
      vmap(lay.ln_gain(l)) += (ubardot.array() * dl.xhat.array() +
                               ubar.array() * dl.xhatdot.array())
                                  .rowwise()
                                  .sum();
      vmap(lay.ln_bias(l)) += ubardot.rowwise().sum();
      MatrixXd xbar = ubar.array().colwise() * net.ln_gain(l).array();
      MatrixXd xbardot = ubardot.array().colwise() * net.ln_gain(l).array();

      const double w = static_cast<double>(xbar.rows());
      RowVectorXd m1 = xbar.colwise().sum() / w;
      RowVectorXd m1dot = xbardot.colwise().sum() / w;
      RowVectorXd m2 = (xbar.array() * dl.xhat.array()).colwise().sum() / w;
      RowVectorXd m2dot = (xbardot.array() * dl.xhat.array() +
                           xbar.array() * dl.xhatdot.array())
                              .colwise()
                              .sum() /
                          w;
      MatrixXd A = (xbar.array().rowwise() - m1.array()) -
                   (dl.xhat.array().rowwise() * m2.array());
      MatrixXd Adot = (xbardot.array().rowwise() - m1dot.array()) -
                      (dl.xhatdot.array().rowwise() * m2.array()) -
                      (dl.xhat.array().rowwise() * m2dot.array());
      zbar = A.array().rowwise() / dl.s.array();
      zbardot = (Adot.array() - zbar.array().rowwise() * dl.sdot.array())
                    .rowwise() /
                dl.s.array();
    } else {
      zbar = std::move(ubar);
      zbardot = std::move(ubardot);
    }
    const MatrixXd& h_prev = l > 0 ? L[static_cast<std::size_t>(l) - 1].h : X;
    const MatrixXd& hdot_prev =
        l > 0 ? L[static_cast<std::size_t>(l) - 1].hdot
              : static_cast<const MatrixXd&>(V);
    wmap(lay.weight(l)).noalias() += zbardot * h_prev.transpose();
    wmap(lay.weight(l)).noalias() += zbar * hdot_prev.transpose();
    vmap(lay.bias(l)) += zbardot.rowwise().sum();
    if (l > 0) {
      hbar.noalias() = net.weight(l).transpose() * zbar;
      hbardot.noalias() = net.weight(l).transpose() * zbardot;
    }
  }
  (void)B;
  return tangent;
}

}  // namespace sam
