#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradsed/data.hpp"
#include "gradsed/linalg.hpp"
#include "gradsed/rng.hpp"

namespace gradsed::model {

using linalg::Matrix;

enum class Readout { mean_pool, last_position };

std::string_view readout_name(Readout r);

struct Architecture {
  int d_model = 128;
  int n_heads = 4;
  int head_dim = 32;
  int d_ff = 256;
  int n_layers = 2;
  int vocab = data::kPrime;
  int seq_len = 2;
  int n_heads_out = 1;
  Readout readout = Readout::mean_pool;
  // Test fixture: skip every encoder layer and the final layer norm, so
  // logits = head(pool(embedded input)).
  bool bypass_encoder = false;

  static Architecture single_task() { return {}; }
  static Architecture multitask() {
    Architecture a;
    a.n_heads_out = data::kNumOps;
    return a;
  }

  [[nodiscard]] std::size_t attention_param_count() const {
    return static_cast<std::size_t>(n_layers) * 4u * static_cast<std::size_t>(d_model) *
           static_cast<std::size_t>(d_model);
  }
  [[nodiscard]] std::size_t embed_width() const {
    return static_cast<std::size_t>(seq_len) * static_cast<std::size_t>(d_model);
  }
  void validate() const;
};

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  [[nodiscard]] std::size_t size() const { return rows * cols; }
};

// Flat parameter layout, in storage order:
//   tok_emb (vocab x d), pos_emb (seq x d),
//   per layer: ln1.g, ln1.b, wq, wk, wv, wo (d x d, no bias), ln2.g, ln2.b,
//              ff1.w (d x d_ff), ff1.b, ff2.w (d_ff x d), ff2.b,
//   lnf.g, lnf.b,
//   per head: head.w (d x vocab), head.b.
// Linear weights are stored input-major so y = x W.
// The attention slice is the concatenation of [wq wk wv wo] for each layer,
// which is one contiguous block of 4 d^2 entries per layer.
class ParamLayout {
 public:
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
  };
  struct Head {
    std::size_t w, b;
  };

  explicit ParamLayout(const Architecture& arch);

  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] const std::vector<TensorInfo>& tensors() const { return tensors_; }
  [[nodiscard]] const TensorInfo& tensor(std::string_view name) const;

  [[nodiscard]] std::size_t tok_emb() const { return tok_emb_; }
  [[nodiscard]] std::size_t pos_emb() const { return pos_emb_; }
  [[nodiscard]] std::size_t lnf_g() const { return lnf_g_; }
  [[nodiscard]] std::size_t lnf_b() const { return lnf_b_; }
  [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
  [[nodiscard]] const std::vector<Head>& heads() const { return heads_; }

  [[nodiscard]] std::size_t attention_size() const { return attention_block_ * layers_.size(); }
  [[nodiscard]] std::size_t attention_block() const { return attention_block_; }

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  std::vector<TensorInfo> tensors_;
  std::size_t size_ = 0;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0;
  std::size_t attention_block_ = 0;
  std::vector<Layer> layers_;
  std::vector<Head> heads_;
};

struct ParamVector {
  std::vector<double> values;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] double* data() { return values.data(); }
  [[nodiscard]] const double* data() const { return values.data(); }
  [[nodiscard]] std::span<double> span() { return values; }
  [[nodiscard]] std::span<const double> span() const { return values; }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

std::vector<double> extract_attention(const ParamLayout& layout, std::span<const double> params);
void insert_attention(const ParamLayout& layout, std::span<const double> attention, std::span<double> params);
// params.attention += scale * direction
void add_to_attention(const ParamLayout& layout, std::span<const double> direction, double scale,
                      std::span<double> params);
double attention_norm(const ParamLayout& layout, std::span<const double> params);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> head_losses;  // one entry per head that contributed
  ParamVector grad;
};

class Transformer {
 public:
  explicit Transformer(Architecture arch);

  [[nodiscard]] const Architecture& arch() const { return arch_; }
  [[nodiscard]] const ParamLayout& layout() const { return layout_; }

  // Gaussian weights with std 1/sqrt(fan_in); embeddings use d_model as
  // their fan. Layer-norm gains 1, all biases 0.
  [[nodiscard]] ParamVector init_params(RngStream rng) const;

  [[nodiscard]] Matrix forward_logits(const ParamVector& params, std::span<const data::Pair> inputs,
                                      int head) const;
  // Logits of every head, sharing one encoder pass.
  [[nodiscard]] std::vector<Matrix> forward_all_heads(const ParamVector& params,
                                                      std::span<const data::Pair> inputs) const;

  // Mean cross-entropy of one head and its gradient over all parameters.
  [[nodiscard]] LossAndGrad loss_and_param_grad(const ParamVector& params, std::span<const data::Pair> inputs,
                                                std::span<const int> labels, int head) const;
  // Sum over heads h of the mean cross-entropy of head h against op h.
  [[nodiscard]] LossAndGrad multitask_loss_and_grad(const ParamVector& params, const data::Batch& batch) const;

  // Row i: gradient of logit y_i of example i with respect to its embedded
  // input (seq_len x d_model, flattened position-major).
  [[nodiscard]] Matrix centroids(const ParamVector& params, std::span<const data::Pair> inputs,
                                 std::span<const int> labels, int head) const;

  // Row i: gradient of example i's cross-entropy with respect to the
  // attention slice.
  [[nodiscard]] Matrix per_example_attention_grads(const ParamVector& params, std::span<const data::Pair> inputs,
                                                   std::span<const int> labels, int head) const;

  [[nodiscard]] double accuracy(const ParamVector& params, std::span<const data::Pair> inputs,
                                std::span<const int> labels, int head) const;

 private:
  struct Cache;
  struct GradSink;

  void forward(const ParamVector& params, std::span<const data::Pair> inputs, Cache& cache) const;
  void backward(const ParamVector& params, const Cache& cache, const Matrix& d_pooled, GradSink& sink) const;
  void check_head(int head) const;
  void check_inputs(std::span<const data::Pair> inputs) const;

  Architecture arch_;
  ParamLayout layout_;
};

}  // namespace gradsed::model
