#include "gradsed/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gradsed::model {

namespace {

using linalg::Vector;
using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kEvalChunk = 1024;

ConstMap view(const ParamVector& p, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
  return ConstMap(p.data() + offset, rows, cols);
}

void layer_norm_forward(const Matrix& x, const double* gain, const double* bias, Matrix& xhat, Vector& rstd,
                        Matrix& out) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(rows, d);
  out.resize(rows, d);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double s = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = s;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double h = (x(r, c) - mean) * s;
      xhat(r, c) = h;
      out(r, c) = h * gain[c] + bias[c];
    }
  }
}

// dx += d(layer_norm)/dx^T dout; dgain/dbias accumulate when non-null.
void layer_norm_backward(const Matrix& dout, const Matrix& xhat, const Vector& rstd, const double* gain,
                         double* dgain, double* dbias, Matrix& dx) {
  const Eigen::Index rows = dout.rows();
  const Eigen::Index d = dout.cols();
  std::vector<double> dxhat(static_cast<std::size_t>(d));
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double g = dout(r, c) * gain[c];
      dxhat[static_cast<std::size_t>(c)] = g;
      mean_dxhat += g;
      mean_dxhat_xhat += g * xhat(r, c);
      if (dgain != nullptr) dgain[c] += dout(r, c) * xhat(r, c);
      if (dbias != nullptr) dbias[c] += dout(r, c);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (Eigen::Index c = 0; c < d; ++c)
      dx(r, c) += rstd[r] * (dxhat[static_cast<std::size_t>(c)] - mean_dxhat - xhat(r, c) * mean_dxhat_xhat);
  }
}

// GELU(x) = x Phi(x) with the exact normal CDF; the forward pass keeps Phi.
double gelu_grad(double x, double cdf) {
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Row-wise softmax cross-entropy. Returns the summed loss; writes
// softmax - onehot into dlogits.
double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix& dlogits) {
  dlogits.resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double e = std::exp(logits(r, c) - mx);
      dlogits(r, c) = e;
      z += e;
    }
    dlogits.row(r) /= z;
    const int y = labels[static_cast<std::size_t>(r)];
    total += -(logits(r, y) - mx - std::log(z));
    dlogits(r, y) -= 1.0;
  }
  return total;
}

}  // namespace

std::string_view readout_name(Readout r) {
  return r == Readout::mean_pool ? "mean_pool" : "last_position";
}

void Architecture::validate() const {
  if (d_model <= 0 || n_heads <= 0 || head_dim <= 0 || d_ff <= 0 || n_layers < 0 || vocab <= 1 || n_heads_out <= 0)
    throw std::invalid_argument("Architecture: non-positive dimension");
  if (d_model != n_heads * head_dim) throw std::invalid_argument("Architecture: d_model != n_heads * head_dim");
  if (seq_len != 2) throw std::invalid_argument("Architecture: inputs are (a, b) pairs, seq_len must be 2");
}

// ---------------------------------------------------------------------------
// ParamLayout

std::size_t ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = size_;
  tensors_.push_back({std::move(name), offset, rows, cols});
  size_ += rows * cols;
  return offset;
}

ParamLayout::ParamLayout(const Architecture& arch) {
  arch.validate();
  const auto d = static_cast<std::size_t>(arch.d_model);
  const auto ff = static_cast<std::size_t>(arch.d_ff);
  const auto v = static_cast<std::size_t>(arch.vocab);
  tok_emb_ = add("tok_emb", v, d);
  pos_emb_ = add("pos_emb", static_cast<std::size_t>(arch.seq_len), d);
  for (int l = 0; l < arch.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer layer{};
    layer.ln1_g = add(p + "ln1.g", 1, d);
    layer.ln1_b = add(p + "ln1.b", 1, d);
    layer.wq = add(p + "wq", d, d);
    layer.wk = add(p + "wk", d, d);
    layer.wv = add(p + "wv", d, d);
    layer.wo = add(p + "wo", d, d);
    layer.ln2_g = add(p + "ln2.g", 1, d);
    layer.ln2_b = add(p + "ln2.b", 1, d);
    layer.ff1_w = add(p + "ff1.w", d, ff);
    layer.ff1_b = add(p + "ff1.b", 1, ff);
    layer.ff2_w = add(p + "ff2.w", ff, d);
    layer.ff2_b = add(p + "ff2.b", 1, d);
    layers_.push_back(layer);
  }
  lnf_g_ = add("lnf.g", 1, d);
  lnf_b_ = add("lnf.b", 1, d);
  for (int h = 0; h < arch.n_heads_out; ++h) {
    const std::string p = "head" + std::to_string(h) + ".";
    Head head{};
    head.w = add(p + "w", d, v);
    head.b = add(p + "b", 1, v);
    heads_.push_back(head);
  }
  attention_block_ = 4 * d * d;
}

const TensorInfo& ParamLayout::tensor(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw std::out_of_range("ParamLayout: no tensor named " + std::string(name));
}

std::vector<double> extract_attention(const ParamLayout& layout, std::span<const double> params) {
  if (params.size() != layout.size()) throw std::invalid_argument("extract_attention: size mismatch");
  std::vector<double> out;
  out.reserve(layout.attention_size());
  for (const auto& layer : layout.layers()) {
    const auto first = params.begin() + static_cast<std::ptrdiff_t>(layer.wq);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(layout.attention_block()));
  }
  return out;
}

void insert_attention(const ParamLayout& layout, std::span<const double> attention, std::span<double> params) {
  if (params.size() != layout.size() || attention.size() != layout.attention_size())
    throw std::invalid_argument("insert_attention: size mismatch");
  std::size_t src = 0;
  for (const auto& layer : layout.layers()) {
    std::copy_n(attention.begin() + static_cast<std::ptrdiff_t>(src), layout.attention_block(),
                params.begin() + static_cast<std::ptrdiff_t>(layer.wq));
    src += layout.attention_block();
  }
}

void add_to_attention(const ParamLayout& layout, std::span<const double> direction, double scale,
                      std::span<double> params) {
  if (params.size() != layout.size() || direction.size() != layout.attention_size())
    throw std::invalid_argument("add_to_attention: size mismatch");
  std::size_t src = 0;
  for (const auto& layer : layout.layers()) {
    for (std::size_t i = 0; i < layout.attention_block(); ++i) params[layer.wq + i] += scale * direction[src + i];
    src += layout.attention_block();
  }
}

double attention_norm(const ParamLayout& layout, std::span<const double> params) {
  double sum = 0.0;
  for (const auto& layer : layout.layers())
    for (std::size_t i = 0; i < layout.attention_block(); ++i) sum += params[layer.wq + i] * params[layer.wq + i];
  return std::sqrt(sum);
}

// ---------------------------------------------------------------------------
// Transformer

struct LayerCache {
  Matrix x_in, xhat1, h1, q, k, v, attn, x_mid, xhat2, h2, z1, cdf, act;
  Vector rstd1, rstd2;
  std::vector<double> probs;  // [batch][head][query][key]
};

struct Transformer::Cache {
  std::size_t batch = 0;
  Matrix x0;
  std::vector<LayerCache> layers;
  Matrix x_out, xhatf, z, pooled;
  Vector rstdf;
};

struct Transformer::GradSink {
  double* param_grad = nullptr;              // accumulates, full layout
  Matrix* embed_grad = nullptr;              // (batch * seq) x d, overwritten
  Matrix* per_example_attention = nullptr;   // batch x attention_size, overwritten
};

Transformer::Transformer(Architecture arch) : arch_(arch), layout_(arch_) {}

void Transformer::check_head(int head) const {
  if (head < 0 || head >= arch_.n_heads_out) throw std::out_of_range("Transformer: head index out of range");
}

void Transformer::check_inputs(std::span<const data::Pair> inputs) const {
  for (const auto& x : inputs)
    if (x.a < 0 || x.a >= arch_.vocab || x.b < 0 || x.b >= arch_.vocab)
      throw std::out_of_range("Transformer: token out of vocabulary");
}

ParamVector Transformer::init_params(RngStream rng) const {
  ParamVector p;
  p.values.assign(layout_.size(), 0.0);
  const auto fill = [&](std::size_t offset, std::size_t count, double std_dev) {
    for (std::size_t i = 0; i < count; ++i) p.values[offset + i] = std_dev * rng.normal();
  };
  const auto ones = [&](std::size_t offset, std::size_t count) {
    std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(offset), count, 1.0);
  };
  const auto d = static_cast<std::size_t>(arch_.d_model);
  const auto ff = static_cast<std::size_t>(arch_.d_ff);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_ff = 1.0 / std::sqrt(static_cast<double>(ff));
  fill(layout_.tok_emb(), static_cast<std::size_t>(arch_.vocab) * d, inv_sqrt_d);
  fill(layout_.pos_emb(), static_cast<std::size_t>(arch_.seq_len) * d, inv_sqrt_d);
  for (const auto& layer : layout_.layers()) {
    ones(layer.ln1_g, d);
    fill(layer.wq, d * d, inv_sqrt_d);
    fill(layer.wk, d * d, inv_sqrt_d);
    fill(layer.wv, d * d, inv_sqrt_d);
    fill(layer.wo, d * d, inv_sqrt_d);
    ones(layer.ln2_g, d);
    fill(layer.ff1_w, d * ff, inv_sqrt_d);
    fill(layer.ff2_w, ff * d, inv_sqrt_ff);
  }
  ones(layout_.lnf_g(), d);
  for (const auto& head : layout_.heads()) fill(head.w, d * static_cast<std::size_t>(arch_.vocab), inv_sqrt_d);
  return p;
}

void Transformer::forward(const ParamVector& params, std::span<const data::Pair> inputs, Cache& cache) const {
  if (params.size() != layout_.size()) throw std::invalid_argument("Transformer: parameter count mismatch");
  check_inputs(inputs);
  const Eigen::Index d = arch_.d_model;
  const Eigen::Index ff = arch_.d_ff;
  const Eigen::Index seq = arch_.seq_len;
  const Eigen::Index heads = arch_.n_heads;
  const Eigen::Index hd = arch_.head_dim;
  const auto batch = static_cast<Eigen::Index>(inputs.size());
  const Eigen::Index rows = batch * seq;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* p = params.data();

  cache.batch = inputs.size();
  cache.x0.resize(rows, d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int tokens[2] = {inputs[static_cast<std::size_t>(b)].a, inputs[static_cast<std::size_t>(b)].b};
    for (Eigen::Index t = 0; t < seq; ++t) {
      const double* te = p + layout_.tok_emb() + static_cast<std::size_t>(tokens[t]) * static_cast<std::size_t>(d);
      const double* pe = p + layout_.pos_emb() + static_cast<std::size_t>(t * d);
      for (Eigen::Index c = 0; c < d; ++c) cache.x0(b * seq + t, c) = te[c] + pe[c];
    }
  }

  const Matrix* x = &cache.x0;
  cache.layers.resize(arch_.bypass_encoder ? 0 : layout_.layers().size());
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const auto& off = layout_.layers()[l];
    LayerCache& lc = cache.layers[l];
    lc.x_in = *x;
    layer_norm_forward(lc.x_in, p + off.ln1_g, p + off.ln1_b, lc.xhat1, lc.rstd1, lc.h1);
    lc.q.noalias() = lc.h1 * view(params, off.wq, d, d);
    lc.k.noalias() = lc.h1 * view(params, off.wk, d, d);
    lc.v.noalias() = lc.h1 * view(params, off.wv, d, d);

    lc.attn.setZero(rows, d);
    lc.probs.assign(static_cast<std::size_t>(batch * heads * seq * seq), 0.0);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        for (Eigen::Index t = 0; t < seq; ++t) {
          double* pr = lc.probs.data() + ((b * heads + h) * seq + t) * seq;
          const double* qrow = lc.q.row(b * seq + t).data() + h * hd;
          double mx = -std::numeric_limits<double>::infinity();
          for (Eigen::Index u = 0; u < seq; ++u) {
            const double* krow = lc.k.row(b * seq + u).data() + h * hd;
            double s = 0.0;
            for (Eigen::Index c = 0; c < hd; ++c) s += qrow[c] * krow[c];
            pr[u] = s * scale;
            mx = std::max(mx, pr[u]);
          }
          double z = 0.0;
          for (Eigen::Index u = 0; u < seq; ++u) {
            pr[u] = std::exp(pr[u] - mx);
            z += pr[u];
          }
          double* out = lc.attn.row(b * seq + t).data() + h * hd;
          for (Eigen::Index u = 0; u < seq; ++u) {
            pr[u] /= z;
            const double* vrow = lc.v.row(b * seq + u).data() + h * hd;
            for (Eigen::Index c = 0; c < hd; ++c) out[c] += pr[u] * vrow[c];
          }
        }
      }
    }
    lc.x_mid = lc.x_in;
    lc.x_mid.noalias() += lc.attn * view(params, off.wo, d, d);

    layer_norm_forward(lc.x_mid, p + off.ln2_g, p + off.ln2_b, lc.xhat2, lc.rstd2, lc.h2);
    lc.z1.noalias() = lc.h2 * view(params, off.ff1_w, d, ff);
    lc.z1.rowwise() += view(params, off.ff1_b, 1, ff).row(0);
    lc.cdf.resize(rows, ff);
    lc.act.resize(rows, ff);
    for (Eigen::Index i = 0; i < lc.z1.size(); ++i) {
      const double z = lc.z1.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
      lc.cdf.data()[i] = cdf;
      lc.act.data()[i] = z * cdf;
    }
    if (l + 1 == cache.layers.size()) {
      cache.x_out = lc.x_mid;
      cache.x_out.noalias() += lc.act * view(params, off.ff2_w, ff, d);
      cache.x_out.rowwise() += view(params, off.ff2_b, 1, d).row(0);
      x = &cache.x_out;
    } else {
      Matrix& next = cache.layers[l + 1].x_in;
      next = lc.x_mid;
      next.noalias() += lc.act * view(params, off.ff2_w, ff, d);
      next.rowwise() += view(params, off.ff2_b, 1, d).row(0);
      x = &next;
    }
  }

  if (arch_.bypass_encoder) {
    cache.z = cache.x0;
  } else {
    if (cache.layers.empty()) cache.x_out = cache.x0;
    layer_norm_forward(cache.x_out, p + layout_.lnf_g(), p + layout_.lnf_b(), cache.xhatf, cache.rstdf, cache.z);
  }

  cache.pooled.resize(batch, d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    if (arch_.readout == Readout::mean_pool)
      cache.pooled.row(b) = cache.z.middleRows(b * seq, seq).colwise().mean();
    else
      cache.pooled.row(b) = cache.z.row(b * seq + seq - 1);
  }
}

void Transformer::backward(const ParamVector& params, const Cache& cache, const Matrix& d_pooled,
                           GradSink& sink) const {
  const Eigen::Index d = arch_.d_model;
  const Eigen::Index ff = arch_.d_ff;
  const Eigen::Index seq = arch_.seq_len;
  const Eigen::Index heads = arch_.n_heads;
  const Eigen::Index hd = arch_.head_dim;
  const auto batch = static_cast<Eigen::Index>(cache.batch);
  const Eigen::Index rows = batch * seq;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* p = params.data();
  double* g = sink.param_grad;
  const auto gmap = [&](std::size_t offset, Eigen::Index r, Eigen::Index c) { return MutMap(g + offset, r, c); };

  thread_local Matrix dz, d_act, dz1, dh, dattn, dq, dk, dv;
  dz.setZero(rows, d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    if (arch_.readout == Readout::mean_pool) {
      for (Eigen::Index t = 0; t < seq; ++t) dz.row(b * seq + t) = d_pooled.row(b) / static_cast<double>(seq);
    } else {
      dz.row(b * seq + seq - 1) = d_pooled.row(b);
    }
  }

  Matrix dx;
  if (arch_.bypass_encoder) {
    dx = dz;
  } else {
    dx = Matrix::Zero(rows, d);
    layer_norm_backward(dz, cache.xhatf, cache.rstdf, p + layout_.lnf_g(), g ? g + layout_.lnf_g() : nullptr,
                        g ? g + layout_.lnf_b() : nullptr, dx);
  }

  if (sink.per_example_attention != nullptr)
    sink.per_example_attention->setZero(batch, static_cast<Eigen::Index>(layout_.attention_size()));

  for (std::size_t li = cache.layers.size(); li-- > 0;) {
    const auto& off = layout_.layers()[li];
    const LayerCache& lc = cache.layers[li];

    // feed-forward block: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
    if (g != nullptr) {
      gmap(off.ff2_w, ff, d).noalias() += lc.act.transpose() * dx;
      gmap(off.ff2_b, 1, d) += dx.colwise().sum();
    }
    d_act.noalias() = dx * view(params, off.ff2_w, ff, d).transpose();
    dz1.resize(rows, ff);
    for (Eigen::Index i = 0; i < dz1.size(); ++i)
      dz1.data()[i] = d_act.data()[i] * gelu_grad(lc.z1.data()[i], lc.cdf.data()[i]);
    if (g != nullptr) {
      gmap(off.ff1_w, d, ff).noalias() += lc.h2.transpose() * dz1;
      gmap(off.ff1_b, 1, ff) += dz1.colwise().sum();
    }
    dh.noalias() = dz1 * view(params, off.ff1_w, d, ff).transpose();
    // dx now holds d/dx_mid
    layer_norm_backward(dh, lc.xhat2, lc.rstd2, p + off.ln2_g, g ? g + off.ln2_g : nullptr,
                        g ? g + off.ln2_b : nullptr, dx);

    // attention block: x_mid = x_in + attn(ln1(x_in)) Wo
    if (g != nullptr) gmap(off.wo, d, d).noalias() += lc.attn.transpose() * dx;
    dattn.noalias() = dx * view(params, off.wo, d, d).transpose();
    dq.setZero(rows, d);
    dk.setZero(rows, d);
    dv.setZero(rows, d);
    std::vector<double> dprob(static_cast<std::size_t>(seq));
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        for (Eigen::Index t = 0; t < seq; ++t) {
          const double* pr = lc.probs.data() + ((b * heads + h) * seq + t) * seq;
          const double* da = dattn.row(b * seq + t).data() + h * hd;
          double weighted = 0.0;
          for (Eigen::Index u = 0; u < seq; ++u) {
            const double* vrow = lc.v.row(b * seq + u).data() + h * hd;
            double* dvrow = dv.row(b * seq + u).data() + h * hd;
            double dp = 0.0;
            for (Eigen::Index c = 0; c < hd; ++c) {
              dp += da[c] * vrow[c];
              dvrow[c] += pr[u] * da[c];
            }
            dprob[static_cast<std::size_t>(u)] = dp;
            weighted += pr[u] * dp;
          }
          const double* qrow = lc.q.row(b * seq + t).data() + h * hd;
          double* dqrow = dq.row(b * seq + t).data() + h * hd;
          for (Eigen::Index u = 0; u < seq; ++u) {
            const double ds = pr[u] * (dprob[static_cast<std::size_t>(u)] - weighted) * scale;
            const double* krow = lc.k.row(b * seq + u).data() + h * hd;
            double* dkrow = dk.row(b * seq + u).data() + h * hd;
            for (Eigen::Index c = 0; c < hd; ++c) {
              dqrow[c] += ds * krow[c];
              dkrow[c] += ds * qrow[c];
            }
          }
        }
      }
    }
    if (g != nullptr) {
      gmap(off.wq, d, d).noalias() += lc.h1.transpose() * dq;
      gmap(off.wk, d, d).noalias() += lc.h1.transpose() * dk;
      gmap(off.wv, d, d).noalias() += lc.h1.transpose() * dv;
    }
    if (sink.per_example_attention != nullptr) {
      Matrix& pe = *sink.per_example_attention;
      const Eigen::Index base = static_cast<Eigen::Index>(li * layout_.attention_block());
      const Eigen::Index dd = d * d;
      for (Eigen::Index b = 0; b < batch; ++b) {
        double* row = pe.row(b).data() + base;
        const auto h1b = lc.h1.middleRows(b * seq, seq);
        MutMap(row, d, d).noalias() = h1b.transpose() * dq.middleRows(b * seq, seq);
        MutMap(row + dd, d, d).noalias() = h1b.transpose() * dk.middleRows(b * seq, seq);
        MutMap(row + 2 * dd, d, d).noalias() = h1b.transpose() * dv.middleRows(b * seq, seq);
        MutMap(row + 3 * dd, d, d).noalias() = lc.attn.middleRows(b * seq, seq).transpose() * dx.middleRows(b * seq, seq);
      }
    }
    dh.noalias() = dq * view(params, off.wq, d, d).transpose();
    dh.noalias() += dk * view(params, off.wk, d, d).transpose();
    dh.noalias() += dv * view(params, off.wv, d, d).transpose();
    layer_norm_backward(dh, lc.xhat1, lc.rstd1, p + off.ln1_g, g ? g + off.ln1_g : nullptr,
                        g ? g + off.ln1_b : nullptr, dx);
  }

  // embedding-table gradients need token ids, which the callers hold
  if (sink.embed_grad != nullptr) *sink.embed_grad = std::move(dx);
}

Matrix Transformer::forward_logits(const ParamVector& params, std::span<const data::Pair> inputs, int head) const {
  check_head(head);
  thread_local Cache cache;
  forward(params, inputs, cache);
  const auto& h = layout_.heads()[static_cast<std::size_t>(head)];
  Matrix logits = cache.pooled * view(params, h.w, arch_.d_model, arch_.vocab);
  logits.rowwise() += view(params, h.b, 1, arch_.vocab).row(0);
  return logits;
}

std::vector<Matrix> Transformer::forward_all_heads(const ParamVector& params,
                                                   std::span<const data::Pair> inputs) const {
  thread_local Cache cache;
  forward(params, inputs, cache);
  std::vector<Matrix> out;
  for (const auto& h : layout_.heads()) {
    Matrix logits = cache.pooled * view(params, h.w, arch_.d_model, arch_.vocab);
    logits.rowwise() += view(params, h.b, 1, arch_.vocab).row(0);
    out.push_back(std::move(logits));
  }
  return out;
}

namespace {

void scatter_embedding_grads(const ParamLayout& layout, int d_model, int seq, std::span<const data::Pair> inputs,
                             const Matrix& dx, double* g) {
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const int tokens[2] = {inputs[b].a, inputs[b].b};
    for (int t = 0; t < seq; ++t) {
      double* tok = g + layout.tok_emb() + static_cast<std::size_t>(tokens[t]) * static_cast<std::size_t>(d_model);
      double* pos = g + layout.pos_emb() + static_cast<std::size_t>(t) * static_cast<std::size_t>(d_model);
      const auto r = static_cast<Eigen::Index>(b) * seq + t;
      for (int c = 0; c < d_model; ++c) {
        tok[c] += dx(r, c);
        pos[c] += dx(r, c);
      }
    }
  }
}

}  // namespace

LossAndGrad Transformer::loss_and_param_grad(const ParamVector& params, std::span<const data::Pair> inputs,
                                             std::span<const int> labels, int head) const {
  check_head(head);
  if (inputs.empty() || labels.size() != inputs.size())
    throw std::invalid_argument("loss_and_param_grad: empty batch or label count mismatch");
  thread_local Cache cache;
  forward(params, inputs, cache);
  const auto& h = layout_.heads()[static_cast<std::size_t>(head)];
  const Eigen::Index d = arch_.d_model;
  const Eigen::Index v = arch_.vocab;
  Matrix logits = cache.pooled * view(params, h.w, d, v);
  logits.rowwise() += view(params, h.b, 1, v).row(0);
  Matrix dlogits;
  const double n = static_cast<double>(inputs.size());
  const double loss = softmax_xent(logits, labels, dlogits) / n;
  if (!std::isfinite(loss)) throw std::runtime_error("loss_and_param_grad: non-finite loss");
  dlogits /= n;

  LossAndGrad out;
  out.loss = loss;
  out.head_losses = {loss};
  out.grad.values.assign(layout_.size(), 0.0);
  double* g = out.grad.data();
  MutMap(g + h.w, d, v).noalias() = cache.pooled.transpose() * dlogits;
  MutMap(g + h.b, 1, v) = dlogits.colwise().sum();
  const Matrix d_pooled = dlogits * view(params, h.w, d, v).transpose();
  Matrix dx;
  GradSink sink{g, &dx, nullptr};
  backward(params, cache, d_pooled, sink);
  scatter_embedding_grads(layout_, arch_.d_model, arch_.seq_len, inputs, dx, g);
  return out;
}

LossAndGrad Transformer::multitask_loss_and_grad(const ParamVector& params, const data::Batch& batch) const {
  if (batch.size() == 0) throw std::invalid_argument("multitask_loss_and_grad: empty batch");
  thread_local Cache cache;
  forward(params, batch.inputs, cache);
  const Eigen::Index d = arch_.d_model;
  const Eigen::Index v = arch_.vocab;
  const double n = static_cast<double>(batch.size());

  LossAndGrad out;
  out.grad.values.assign(layout_.size(), 0.0);
  double* g = out.grad.data();
  Matrix d_pooled = Matrix::Zero(static_cast<Eigen::Index>(batch.size()), d);
  for (int head = 0; head < arch_.n_heads_out; ++head) {
    const auto& h = layout_.heads()[static_cast<std::size_t>(head)];
    Matrix logits = cache.pooled * view(params, h.w, d, v);
    logits.rowwise() += view(params, h.b, 1, v).row(0);
    Matrix dlogits;
    const double loss = softmax_xent(logits, batch.labels[static_cast<std::size_t>(head)], dlogits) / n;
    if (!std::isfinite(loss)) throw std::runtime_error("multitask_loss_and_grad: non-finite loss");
    dlogits /= n;
    out.head_losses.push_back(loss);
    out.loss += loss;
    MutMap(g + h.w, d, v).noalias() = cache.pooled.transpose() * dlogits;
    MutMap(g + h.b, 1, v) = dlogits.colwise().sum();
    d_pooled.noalias() += dlogits * view(params, h.w, d, v).transpose();
  }
  Matrix dx;
  GradSink sink{g, &dx, nullptr};
  backward(params, cache, d_pooled, sink);
  scatter_embedding_grads(layout_, arch_.d_model, arch_.seq_len, batch.inputs, dx, g);
  return out;
}

Matrix Transformer::centroids(const ParamVector& params, std::span<const data::Pair> inputs,
                              std::span<const int> labels, int head) const {
  check_head(head);
  if (labels.size() != inputs.size()) throw std::invalid_argument("centroids: label count mismatch");
  thread_local Cache cache;
  forward(params, inputs, cache);
  const auto& h = layout_.heads()[static_cast<std::size_t>(head)];
  const Eigen::Index d = arch_.d_model;
  const ConstMap w = view(params, h.w, d, arch_.vocab);
  Matrix d_pooled(static_cast<Eigen::Index>(inputs.size()), d);
  for (std::size_t i = 0; i < inputs.size(); ++i) d_pooled.row(static_cast<Eigen::Index>(i)) = w.col(labels[i]).transpose();
  Matrix dx;
  GradSink sink{nullptr, &dx, nullptr};
  backward(params, cache, d_pooled, sink);
  if (!dx.allFinite()) throw std::runtime_error("centroids: non-finite entries");
  // (batch * seq) x d row-major is the same buffer as batch x (seq * d)
  Matrix out = Eigen::Map<const Matrix>(dx.data(), static_cast<Eigen::Index>(inputs.size()),
                                        static_cast<Eigen::Index>(arch_.embed_width()));
  return out;
}

Matrix Transformer::per_example_attention_grads(const ParamVector& params, std::span<const data::Pair> inputs,
                                                std::span<const int> labels, int head) const {
  check_head(head);
  if (labels.size() != inputs.size()) throw std::invalid_argument("per_example_attention_grads: label count mismatch");
  thread_local Cache cache;
  forward(params, inputs, cache);
  const auto& h = layout_.heads()[static_cast<std::size_t>(head)];
  const Eigen::Index d = arch_.d_model;
  const Eigen::Index v = arch_.vocab;
  Matrix logits = cache.pooled * view(params, h.w, d, v);
  logits.rowwise() += view(params, h.b, 1, v).row(0);
  Matrix dlogits;
  softmax_xent(logits, labels, dlogits);
  const Matrix d_pooled = dlogits * view(params, h.w, d, v).transpose();
  Matrix dx;
  Matrix out;
  GradSink sink{nullptr, &dx, &out};
  backward(params, cache, d_pooled, sink);
  return out;
}

double Transformer::accuracy(const ParamVector& params, std::span<const data::Pair> inputs,
                             std::span<const int> labels, int head) const {
  if (inputs.empty()) throw std::invalid_argument("accuracy: empty dataset");
  if (labels.size() != inputs.size()) throw std::invalid_argument("accuracy: label count mismatch");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < inputs.size(); start += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, inputs.size() - start);
    const Matrix logits = forward_logits(params, inputs.subspan(start, count), head);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index arg = 0;
      logits.row(r).maxCoeff(&arg);
      if (arg == labels[start + static_cast<std::size_t>(r)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

}  // namespace gradsed::model
