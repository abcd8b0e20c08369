#pragma once

// Minimal pre-norm decoder-only transformer with learned positional
// embeddings and an exact hand-written backward pass. Everything is float64.
//
// Block:  x += Attn(LN1(x));  x += MLP(LN2(x))
// Head:   logits = LNf(x) * W_out + b_out
//
// Weight matrices are row-major [in x out] and applied as y = x W + b.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/random.hpp"
#include "cpolab/tokens.hpp"

namespace cpolab {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ColVector = Eigen::VectorXd;

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_context = 64;

  void validate() const {
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(d_model >= 1, "d_model must be positive");
    require(n_layers >= 1, "n_layers must be positive");
    require(n_heads >= 1, "n_heads must be positive");
    require(d_model % n_heads == 0, "n_heads must divide d_model");
    require(max_context >= 2, "max_context must be >= 2");
  }
  [[nodiscard]] int head_dim() const { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A named contiguous slice of the flat parameter vector.
struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  [[nodiscard]] std::size_t size() const { return rows * cols; }
  friend bool operator==(const ParamGroup&, const ParamGroup&) = default;
};

using ParameterLayout = std::vector<ParamGroup>;

/// Number of groups per transformer block in the layout.
inline constexpr std::size_t kGroupsPerLayer = 12;

inline ParameterLayout make_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto C = static_cast<std::size_t>(cfg.max_context);
  ParameterLayout layout;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    layout.push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  add("wte", V, d);
  add("wpe", C, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.g", 1, d);
    add(p + "ln1.b", 1, d);
    add(p + "attn.qkv.w", d, 3 * d);
    add(p + "attn.qkv.b", 1, 3 * d);
    add(p + "attn.proj.w", d, d);
    add(p + "attn.proj.b", 1, d);
    add(p + "ln2.g", 1, d);
    add(p + "ln2.b", 1, d);
    add(p + "mlp.fc.w", d, 4 * d);
    add(p + "mlp.fc.b", 1, 4 * d);
    add(p + "mlp.proj.w", 4 * d, d);
    add(p + "mlp.proj.b", 1, d);
  }
  add("lnf.g", 1, d);
  add("lnf.b", 1, d);
  add("out.w", d, V);
  add("out.b", 1, V);
  return layout;
}

inline std::size_t layout_size(const ParameterLayout& layout) {
  return layout.empty() ? 0 : layout.back().offset + layout.back().size();
}

/// Flat trainable weights plus the named layout describing them.
class Parameters {
 public:
  Parameters() = default;
  explicit Parameters(ParameterLayout layout)
      : layout_(std::move(layout)), flat_(layout_size(layout_), 0.0) {}
  Parameters(ParameterLayout layout, std::vector<double> flat)
      : layout_(std::move(layout)), flat_(std::move(flat)) {
    require(flat_.size() == layout_size(layout_), "flat length does not match layout");
  }

  /// All-zero parameters for the config.
  static Parameters zeros(const ModelConfig& cfg) { return Parameters(make_layout(cfg)); }

  [[nodiscard]] std::size_t size() const { return flat_.size(); }
  [[nodiscard]] std::span<const double> flat() const { return flat_; }
  [[nodiscard]] std::span<double> flat() { return flat_; }
  [[nodiscard]] const ParameterLayout& layout() const { return layout_; }
  [[nodiscard]] double* data() { return flat_.data(); }
  [[nodiscard]] const double* data() const { return flat_.data(); }

  [[nodiscard]] const ParamGroup& group_info(const std::string& name) const {
    for (const auto& g : layout_) {
      if (g.name == name) return g;
    }
    throw ValidationError("no parameter group named '" + name + "'");
  }
  [[nodiscard]] std::span<const double> group(const std::string& name) const {
    const auto& g = group_info(name);
    return std::span<const double>(flat_).subspan(g.offset, g.size());
  }
  [[nodiscard]] std::span<double> group(const std::string& name) {
    const auto& g = group_info(name);
    return std::span<double>(flat_).subspan(g.offset, g.size());
  }

  [[nodiscard]] bool same_layout(const Parameters& other) const { return layout_ == other.layout_; }

  Parameters& operator+=(const Parameters& other) {
    require(same_layout(other), "parameter layouts differ");
    for (std::size_t i = 0; i < flat_.size(); ++i) flat_[i] += other.flat_[i];
    return *this;
  }
  Parameters& operator*=(double s) {
    for (double& v : flat_) v *= s;
    return *this;
  }
  friend Parameters operator+(Parameters a, const Parameters& b) { return a += b; }
  friend Parameters operator*(double s, Parameters a) { return a *= s; }

  friend bool operator==(const Parameters&, const Parameters&) = default;

 private:
  ParameterLayout layout_;
  std::vector<double> flat_;
};

/// Closed-form parameter count.
inline std::size_t parameter_count(const ModelConfig& cfg) {
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto C = static_cast<std::size_t>(cfg.max_context);
  const auto L = static_cast<std::size_t>(cfg.n_layers);
  return V * d + C * d + L * (12 * d * d + 13 * d) + 2 * d + d * V + V;
}

/// N(0, scale^2) weights and embeddings, unit norm gains, zero biases.
inline Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.02) {
  Parameters params = Parameters::zeros(cfg);
  Rng rng = make_rng(seed, stream::kInit);
  std::normal_distribution<double> normal(0.0, scale);
  for (const auto& g : params.layout()) {
    auto values = params.flat().subspan(g.offset, g.size());
    const bool is_gain = g.name.ends_with(".g");
    const bool is_bias = g.name.ends_with(".b");
    for (double& v : values) v = is_gain ? 1.0 : is_bias ? 0.0 : normal(rng);
  }
  return params;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
struct LayerWeights {
  T *ln1_g, *ln1_b, *qkv_w, *qkv_b, *proj_w, *proj_b;
  T *ln2_g, *ln2_b, *fc_w, *fc_b, *mlp_w, *mlp_b;
};

template <typename T>
struct WeightViews {
  T* wte;
  T* wpe;
  std::vector<LayerWeights<T>> layers;
  T *lnf_g, *lnf_b, *out_w, *out_b;
};

template <typename T>
WeightViews<T> views(T* base, const ModelConfig& cfg, const ParameterLayout& layout) {
  WeightViews<T> w{};
  w.wte = base + layout[0].offset;
  w.wpe = base + layout[1].offset;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::size_t g0 = 2 + static_cast<std::size_t>(l) * kGroupsPerLayer;
    auto at = [&](std::size_t j) { return base + layout[g0 + j].offset; };
    w.layers.push_back({at(0), at(1), at(2), at(3), at(4), at(5), at(6), at(7), at(8), at(9), at(10),
                        at(11)});
  }
  const std::size_t tail = 2 + static_cast<std::size_t>(cfg.n_layers) * kGroupsPerLayer;
  w.lnf_g = base + layout[tail].offset;
  w.lnf_b = base + layout[tail + 1].offset;
  w.out_w = base + layout[tail + 2].offset;
  w.out_b = base + layout[tail + 3].offset;
  return w;
}

inline Eigen::Map<const Matrix> cmat(const double* p, Eigen::Index r, Eigen::Index c) {
  return Eigen::Map<const Matrix>(p, r, c);
}
inline Eigen::Map<Matrix> mmat(double* p, Eigen::Index r, Eigen::Index c) { return Eigen::Map<Matrix>(p, r, c); }
inline Eigen::Map<const RowVector> crow(const double* p, Eigen::Index n) {
  return Eigen::Map<const RowVector>(p, n);
}
inline Eigen::Map<RowVector> mrow(double* p, Eigen::Index n) { return Eigen::Map<RowVector>(p, n); }

struct NormCache {
  Matrix out;    // g * xhat + b
  Matrix xhat;
  ColVector rstd;
};

inline void layer_norm(const Matrix& x, const double* g, const double* b, NormCache& cache) {
  const Eigen::Index T = x.rows();
  const Eigen::Index d = x.cols();
  cache.xhat.resize(T, d);
  cache.out.resize(T, d);
  cache.rstd.resize(T);
  auto gain = crow(g, d);
  auto bias = crow(b, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mean = x.row(t).mean();
    const double var = (x.row(t).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd(t) = rstd;
    cache.xhat.row(t) = (x.row(t).array() - mean) * rstd;
    cache.out.row(t) = cache.xhat.row(t).cwiseProduct(gain) + bias;
  }
}

/// Returns dL/dx and accumulates gain/bias gradients.
inline Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const double* g, double* dg,
                                  double* db) {
  const Eigen::Index T = dy.rows();
  const Eigen::Index d = dy.cols();
  mrow(dg, d) += RowVector(dy.cwiseProduct(cache.xhat).colwise().sum());
  mrow(db, d) += RowVector(dy.colwise().sum());
  Matrix dxhat = dy.array().rowwise() * crow(g, d).array();
  Matrix dx(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mean_dxhat = dxhat.row(t).mean();
    const double mean_dxhat_xhat = dxhat.row(t).dot(cache.xhat.row(t)) / static_cast<double>(d);
    dx.row(t) = cache.rstd(t) *
                (dxhat.row(t).array() - mean_dxhat - cache.xhat.row(t).array() * mean_dxhat_xhat);
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace detail

struct LayerCache {
  Matrix x_in;
  detail::NormCache ln1;
  Matrix qkv;
  std::vector<Matrix> probs;  // per head, T x T, zero above the diagonal
  Matrix attn;
  Matrix x_mid;
  detail::NormCache ln2;
  Matrix fc;   // pre-activation
  Matrix act;  // GELU(fc)
};

/// Everything the backward pass needs, plus the outputs.
struct ForwardTrace {
  std::vector<TokenId> ids;
  std::vector<LayerCache> layers;
  Matrix x_final;
  detail::NormCache lnf;  // lnf.out is the final hidden state
  Matrix logits;          // T x vocab_size
  const double* params_data = nullptr;
  std::size_t params_size = 0;

  [[nodiscard]] std::size_t length() const { return ids.size(); }
  [[nodiscard]] const Matrix& hidden() const { return lnf.out; }
};

/// Full forward pass over ids (no truncation). Position t sees ids[0..t].
inline ForwardTrace forward(const Parameters& params, const ModelConfig& cfg, std::span<const TokenId> ids) {
  using detail::cmat;
  using detail::crow;
  require(params.size() == parameter_count(cfg), "parameters do not match model config");
  require(!ids.empty(), "forward needs at least one token");
  if (ids.size() > static_cast<std::size_t>(cfg.max_context)) {
    throw LengthError("sequence of length " + std::to_string(ids.size()) + " exceeds max_context " +
                      std::to_string(cfg.max_context));
  }
  const auto T = static_cast<Eigen::Index>(ids.size());
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index V = cfg.vocab_size;
  const Eigen::Index hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto w = detail::views(params.data(), cfg, params.layout());

  ForwardTrace tr;
  tr.ids.assign(ids.begin(), ids.end());
  tr.params_data = params.data();
  tr.params_size = params.size();

  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId id = ids[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) throw ValidationError("token id out of range: " + std::to_string(id));
    x.row(t) = crow(w.wte + id * d, d) + crow(w.wpe + t * d, d);
  }

  tr.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& c = tr.layers[static_cast<std::size_t>(l)];
    c.x_in = x;
    detail::layer_norm(x, lw.ln1_g, lw.ln1_b, c.ln1);
    c.qkv = c.ln1.out * cmat(lw.qkv_w, d, 3 * d);
    c.qkv.rowwise() += crow(lw.qkv_b, 3 * d);
    c.attn.resize(T, d);
    c.probs.resize(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto q = c.qkv.block(0, h * hd, T, hd);
      auto k = c.qkv.block(0, d + h * hd, T, hd);
      auto v = c.qkv.block(0, 2 * d + h * hd, T, hd);
      Matrix& p = c.probs[static_cast<std::size_t>(h)];
      p = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double m = p.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - m);
          sum += p(i, j);
        }
        p.row(i).head(i + 1) /= sum;
        for (Eigen::Index j = i + 1; j < T; ++j) p(i, j) = 0.0;
      }
      c.attn.block(0, h * hd, T, hd) = p * v;
    }
    x = c.x_in + c.attn * cmat(lw.proj_w, d, d);
    x.rowwise() += crow(lw.proj_b, d);
    c.x_mid = x;
    detail::layer_norm(x, lw.ln2_g, lw.ln2_b, c.ln2);
    c.fc = c.ln2.out * cmat(lw.fc_w, d, 4 * d);
    c.fc.rowwise() += crow(lw.fc_b, 4 * d);
    c.act = c.fc.unaryExpr([](double z) { return detail::gelu(z); });
    x = c.x_mid + c.act * cmat(lw.mlp_w, 4 * d, d);
    x.rowwise() += crow(lw.mlp_b, d);
  }
  tr.x_final = x;
  detail::layer_norm(x, w.lnf_g, w.lnf_b, tr.lnf);
  tr.logits = tr.lnf.out * cmat(w.out_w, d, V);
  tr.logits.rowwise() += crow(w.out_b, V);
  return tr;
}

/// Accumulates dL/dparams into grad given dL/dlogits for one trace.
/// Products and sums are evaluated into aligned temporaries before the
/// elementwise add, so the result does not depend on where grad lives.
inline void backward(const Parameters& params, const ModelConfig& cfg, const ForwardTrace& tr,
                     const Matrix& dlogits, std::span<double> grad) {
  using detail::cmat;
  using detail::mmat;
  using detail::mrow;
  if (tr.params_data != params.data() || tr.params_size != params.size()) {
    throw ValidationError("trace was not produced by these parameters");
  }
  require(grad.size() == params.size(), "gradient buffer has the wrong size");
  const auto T = static_cast<Eigen::Index>(tr.length());
  require(dlogits.rows() == T && dlogits.cols() == cfg.vocab_size, "dlogits shape mismatch");
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index V = cfg.vocab_size;
  const Eigen::Index hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto w = detail::views(params.data(), cfg, params.layout());
  const auto g = detail::views(grad.data(), cfg, params.layout());

  mmat(g.out_w, d, V) += Matrix(tr.lnf.out.transpose() * dlogits);
  mrow(g.out_b, V) += RowVector(dlogits.colwise().sum());
  Matrix dhidden = dlogits * cmat(w.out_w, d, V).transpose();
  Matrix dx = detail::layer_norm_backward(dhidden, tr.lnf, w.lnf_g, g.lnf_g, g.lnf_b);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    const auto& lg = g.layers[static_cast<std::size_t>(l)];
    const auto& c = tr.layers[static_cast<std::size_t>(l)];

    // MLP branch.
    mmat(lg.mlp_w, 4 * d, d) += Matrix(c.act.transpose() * dx);
    mrow(lg.mlp_b, d) += RowVector(dx.colwise().sum());
    Matrix dfc = dx * cmat(lw.mlp_w, 4 * d, d).transpose();
    dfc.array() *= c.fc.unaryExpr([](double z) { return detail::gelu_grad(z); }).array();
    mmat(lg.fc_w, d, 4 * d) += Matrix(c.ln2.out.transpose() * dfc);
    mrow(lg.fc_b, 4 * d) += RowVector(dfc.colwise().sum());
    Matrix dln2 = dfc * cmat(lw.fc_w, d, 4 * d).transpose();
    dx += detail::layer_norm_backward(dln2, c.ln2, lw.ln2_g, lg.ln2_g, lg.ln2_b);

    // Attention branch.
    mmat(lg.proj_w, d, d) += Matrix(c.attn.transpose() * dx);
    mrow(lg.proj_b, d) += RowVector(dx.colwise().sum());
    Matrix dattn = dx * cmat(lw.proj_w, d, d).transpose();
    Matrix dqkv(T, 3 * d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto q = c.qkv.block(0, h * hd, T, hd);
      auto k = c.qkv.block(0, d + h * hd, T, hd);
      auto v = c.qkv.block(0, 2 * d + h * hd, T, hd);
      const Matrix& p = c.probs[static_cast<std::size_t>(h)];
      Matrix dout = dattn.block(0, h * hd, T, hd);
      Matrix dp = dout * v.transpose();
      dqkv.block(0, 2 * d + h * hd, T, hd) = p.transpose() * dout;
      ColVector row_dot = dp.cwiseProduct(p).rowwise().sum();
      Matrix ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
      dqkv.block(0, h * hd, T, hd) = ds * k;
      dqkv.block(0, d + h * hd, T, hd) = ds.transpose() * q;
    }
    mmat(lg.qkv_w, d, 3 * d) += Matrix(c.ln1.out.transpose() * dqkv);
    mrow(lg.qkv_b, 3 * d) += RowVector(dqkv.colwise().sum());
    Matrix dln1 = dqkv * cmat(lw.qkv_w, d, 3 * d).transpose();
    dx += detail::layer_norm_backward(dln1, c.ln1, lw.ln1_g, lg.ln1_g, lg.ln1_b);
  }

  for (Eigen::Index t = 0; t < T; ++t) {
    const TokenId id = tr.ids[static_cast<std::size_t>(t)];
    mrow(g.wte + id * d, d) += dx.row(t);
    mrow(g.wpe + t * d, d) += dx.row(t);
  }
}

/// log-sum-exp of a row, max-subtracted.
template <typename Row>
double log_sum_exp(const Row& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// Log-softmax of one logits row.
inline std::vector<double> log_softmax_row(const Matrix& logits, Eigen::Index row) {
  const double lse = log_sum_exp(logits.row(row));
  std::vector<double> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index v = 0; v < logits.cols(); ++v) out[static_cast<std::size_t>(v)] = logits(row, v) - lse;
  return out;
}

inline void check_pair_fits(const ModelConfig& cfg, std::size_t prefix_len, std::size_t cont_len) {
  if (prefix_len + cont_len > static_cast<std::size_t>(cfg.max_context)) {
    throw LengthError("prefix+continuation length " + std::to_string(prefix_len + cont_len) +
                      " exceeds max_context " + std::to_string(cfg.max_context));
  }
}

/// Forward pass over prefix ++ cont.
inline ForwardTrace forward_pair(const Parameters& params, const ModelConfig& cfg, const TokenSequence& prefix,
                                 const TokenSequence& cont) {
  require(!prefix.empty() && !cont.empty(), "prefix and continuation must be non-empty");
  check_pair_fits(cfg, prefix.size(), cont.size());
  const auto ids = concat(prefix, cont.ids());
  return forward(params, cfg, ids);
}

/// log pi(cont | prefix) read off a trace of prefix ++ cont.
inline double continuation_logprob(const ForwardTrace& tr, std::size_t prefix_len, const TokenSequence& cont) {
  double total = 0.0;
  for (std::size_t t = 0; t < cont.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(prefix_len + t - 1);
    total += tr.logits(row, cont[t]) - log_sum_exp(tr.logits.row(row));
  }
  return total;
}

/// dL/dlogits for L = weight * log pi(cont | prefix), added into dlogits.
inline void add_logprob_cotangent(const ForwardTrace& tr, std::size_t prefix_len, const TokenSequence& cont,
                                  double weight, Matrix& dlogits) {
  if (dlogits.rows() != tr.logits.rows() || dlogits.cols() != tr.logits.cols()) {
    dlogits = Matrix::Zero(tr.logits.rows(), tr.logits.cols());
  }
  for (std::size_t t = 0; t < cont.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(prefix_len + t - 1);
    const double lse = log_sum_exp(tr.logits.row(row));
    dlogits.row(row).array() -= weight * (tr.logits.row(row).array() - lse).exp();
    dlogits(row, cont[t]) += weight;
  }
}

/// log pi(cont | prefix) = sum over continuation positions of the log-softmax
/// at the preceding position.
inline double sequence_logprob(const Parameters& params, const ModelConfig& cfg, const TokenSequence& prefix,
                               const TokenSequence& cont) {
  const auto tr = forward_pair(params, cfg, prefix, cont);
  return continuation_logprob(tr, prefix.size(), cont);
}

/// Final-layer hidden states (after the final norm), one row per position.
inline Matrix hidden_states(const Parameters& params, const ModelConfig& cfg, std::span<const TokenId> ids) {
  return forward(params, cfg, ids).lnf.out;
}

/// Next-token log-probabilities after prefix ++ partial.
inline std::vector<double> next_token_logprobs(const Parameters& params, const ModelConfig& cfg,
                                               const TokenSequence& prefix, std::span<const TokenId> partial) {
  const auto ids = concat(prefix, partial);
  const auto tr = forward(params, cfg, ids);
  return log_softmax_row(tr.logits, tr.logits.rows() - 1);
}

/// The k highest-logit token ids, ties broken by lower id.
inline std::vector<TokenId> top_k_ids(std::span<const double> logits, int k) {
  std::vector<TokenId> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](TokenId a, TokenId b) {
    const double la = logits[static_cast<std::size_t>(a)];
    const double lb = logits[static_cast<std::size_t>(b)];
    return la > lb || (la == lb && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

/// Autoregressive top-k sampling from prefix. Stops after EOS or max_new
/// tokens; max_new is clipped to the remaining context.
inline TokenSequence sample_topk(const Parameters& params, const ModelConfig& cfg, const TokenSequence& prefix,
                                 int k, int max_new, std::uint64_t seed) {
  require(k >= 1 && k <= cfg.vocab_size, "top-k must be in [1, vocab_size]");
  require(max_new >= 1, "max_new must be positive");
  require(!prefix.empty(), "prefix must be non-empty");
  if (prefix.size() >= static_cast<std::size_t>(cfg.max_context)) {
    throw LengthError("prefix leaves no room in the context window");
  }
  const int budget = std::min(max_new, cfg.max_context - static_cast<int>(prefix.size()));
  Rng rng(seed);
  std::vector<TokenId> ids(prefix.begin(), prefix.end());
  std::vector<TokenId> out;
  std::vector<double> row(static_cast<std::size_t>(cfg.vocab_size));
  std::vector<double> weights(static_cast<std::size_t>(k));
  for (int step = 0; step < budget; ++step) {
    const auto tr = forward(params, cfg, ids);
    const Eigen::Index last = tr.logits.rows() - 1;
    for (Eigen::Index v = 0; v < tr.logits.cols(); ++v) row[static_cast<std::size_t>(v)] = tr.logits(last, v);
    const auto top = top_k_ids(row, k);
    const double m = row[static_cast<std::size_t>(top.front())];
    for (std::size_t i = 0; i < top.size(); ++i) weights[i] = std::exp(row[static_cast<std::size_t>(top[i])] - m);
    const TokenId next = top[sample_categorical(weights, rng)];
    out.push_back(next);
    ids.push_back(next);
    if (next == kEos) break;
  }
  return TokenSequence(std::move(out));
}

/// Non-owning (config, params) pair usable wherever a language model is
/// expected.
struct TransformerModel {
  const ModelConfig& config;
  const Parameters& params;

  [[nodiscard]] int vocab_size() const { return config.vocab_size; }
  [[nodiscard]] double sequence_logprob(const TokenSequence& prefix, const TokenSequence& cont) const {
    return cpolab::sequence_logprob(params, config, prefix, cont);
  }
  [[nodiscard]] std::vector<double> next_logprobs(const TokenSequence& prefix,
                                                  std::span<const TokenId> partial) const {
    return next_token_logprobs(params, config, prefix, partial);
  }
};

}  // namespace cpolab
