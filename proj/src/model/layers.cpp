// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <limits>

#include "spell/model.hpp"

namespace spell {

namespace {

template <typename T>
void check_rows(const Matrix<T>& x, const Adjacency& adj, const char* op) {
  if (x.rows() != adj.node_count) {
    fail(ErrorKind::kValidation,
         std::string("graph/feature mismatch in ") + op + ": " +
             std::to_string(x.rows()) + " feature rows vs " +
             std::to_string(adj.node_count) + " graph nodes");
  }
}

template <typename T>
void add_bias_rows(Matrix<T>& m, const ParamTensor<T>& bias) {
  const auto b = bias.value.row(0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
}

template <typename T>
void accumulate_colsum(ParamTensor<T>& bias, const Matrix<T>& g) {
  auto gb = bias.grad.row(0);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    auto r = g.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
  }
}

/// out[v] = sum of h[w] over in-neighbours w of v.
template <typename T>
Matrix<T> gather_sum(const Matrix<T>& h, const Adjacency& adj) {
  Matrix<T> out(adj.node_count, h.cols());
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    auto o = out.row(v);
    for (std::uint32_t w : adj.in_neighbors(v)) {
      auto src = h.row(w);
      for (std::size_t k = 0; k < o.size(); ++k) o[k] += src[k];
    }
  }
  return out;
}

/// Transpose of gather_sum: grad_h[w] += grad[v] for each edge w -> v.
template <typename T>
Matrix<T> scatter_sum(const Matrix<T>& grad, const Adjacency& adj) {
  Matrix<T> out(adj.node_count, grad.cols());
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    auto g = grad.row(v);
    for (std::uint32_t w : adj.in_neighbors(v)) {
      auto o = out.row(w);
      for (std::size_t k = 0; k < o.size(); ++k) o[k] += g[k];
    }
  }
  return out;
}

template <typename T>
void accumulate_rows(ParamTensor<T>& target, std::size_t row_offset,
                     const Matrix<T>& grad) {
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    auto dst = target.grad.row(row_offset + i);
    auto src = grad.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
}

/// Optional BN + ReLU tail shared by Dense and SageConv.
template <typename T>
Matrix<T> norm_relu_forward(Matrix<T> pre, std::optional<BatchNormState<T>>& bn,
                            Mode mode, BatchNormCache<T>* norm,
                            ReluCache<T>* act) {
  if (!bn) return pre;
  return relu(batchnorm_forward(pre, *bn, mode, norm), act);
}

template <typename T>
Matrix<T> norm_relu_infer(Matrix<T> pre,
                          const std::optional<BatchNormState<T>>& bn) {
  if (!bn) return pre;
  return relu(batchnorm_infer(pre, *bn));
}

template <typename T>
Matrix<T> norm_relu_backward(const Matrix<T>& grad_out,
                             std::optional<BatchNormState<T>>& bn,
                             BatchNormCache<T>& norm, ReluCache<T>& act) {
  if (!bn) return grad_out;
  return batchnorm_backward(relu_backward(grad_out, act), norm, *bn);
}

}  // namespace

// ---------------------------------------------------------------------------
// Dense

template <typename T>
Dense<T>::Dense(const std::string& prefix, std::size_t in, std::size_t out,
                bool norm_relu)
    : weight(prefix + ".weight", in, out), bias(prefix + ".bias", 1, out) {
  if (norm_relu) bn.emplace(prefix + ".bn", out);
}

template <typename T>
Matrix<T> Dense<T>::forward(const Matrix<T>& x, Mode mode, Cache* cache) {
  Matrix<T> pre =
      linear_forward(x, weight, bias, cache ? &cache->linear : nullptr);
  return norm_relu_forward(std::move(pre), bn, mode,
                           cache ? &cache->norm : nullptr,
                           cache ? &cache->act : nullptr);
}

template <typename T>
Matrix<T> Dense<T>::infer(const Matrix<T>& x) const {
  return norm_relu_infer(linear_forward(x, weight, bias), bn);
}

template <typename T>
Matrix<T> Dense<T>::backward(const Matrix<T>& grad_out, Cache& cache,
                             std::size_t input_grad_from) {
  Matrix<T> g = norm_relu_backward(grad_out, bn, cache.norm, cache.act);
  return linear_backward(g, cache.linear, weight, bias, input_grad_from);
}

template <typename T>
void Dense<T>::collect(std::vector<ParamTensor<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
  if (bn) {
    out.push_back(&bn->gamma);
    out.push_back(&bn->beta);
  }
}

// ---------------------------------------------------------------------------
// SageConv

template <typename T>
SageConv<T>::SageConv(const std::string& prefix, std::size_t in,
                      std::size_t out, bool norm_relu)
    : weight(prefix + ".weight", in, out), bias(prefix + ".bias", 1, out) {
  if (norm_relu) bn.emplace(prefix + ".bn", out);
}

template <typename T>
Matrix<T> SageConv<T>::aggregate(const Matrix<T>& x,
                                 const Adjacency& adj) const {
  check_rows(x, adj, "sage_conv");
  Matrix<T> out = gather_sum(matmul(x, weight.value), adj);
  add_bias_rows(out, bias);
  return out;
}

template <typename T>
Matrix<T> SageConv<T>::forward(const Matrix<T>& x, const Adjacency& adj,
                               Mode mode, Cache* cache) {
  Matrix<T> pre = aggregate(x, adj);
  if (cache) {
    cache->adj = &adj;
    cache->input = x;
  }
  return norm_relu_forward(std::move(pre), bn, mode,
                           cache ? &cache->norm : nullptr,
                           cache ? &cache->act : nullptr);
}

template <typename T>
Matrix<T> SageConv<T>::infer(const Matrix<T>& x, const Adjacency& adj) const {
  return norm_relu_infer(aggregate(x, adj), bn);
}

template <typename T>
Matrix<T> SageConv<T>::backward(const Matrix<T>& grad_out, Cache& cache) {
  if (!cache.input || !cache.adj) {
    fail(ErrorKind::kState, "sage_conv '" + weight.name +
                                "': backward called without a cached forward");
  }
  const Matrix<T> grad_pre = norm_relu_backward(grad_out, bn, cache.norm,
                                                cache.act);
  accumulate_colsum(bias, grad_pre);
  const Matrix<T> grad_h = scatter_sum(grad_pre, *cache.adj);
  add_inplace(weight.grad, matmul_tn(*cache.input, grad_h));
  Matrix<T> grad_x = matmul_nt(grad_h, weight.value);
  cache.input.reset();
  return grad_x;
}

template <typename T>
void SageConv<T>::collect(std::vector<ParamTensor<T>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
  if (bn) {
    out.push_back(&bn->gamma);
    out.push_back(&bn->beta);
  }
}

// ---------------------------------------------------------------------------
// EdgeConv

template <typename T>
EdgeConv<T>::EdgeConv(const std::string& prefix, std::size_t in,
                      std::size_t hidden, std::size_t out)
    : lin1_weight(prefix + ".lin1.weight", 2 * in, hidden),
      lin1_bias(prefix + ".lin1.bias", 1, hidden),
      lin2_weight(prefix + ".lin2.weight", hidden, out),
      lin2_bias(prefix + ".lin2.bias", 1, out),
      bn(prefix + ".bn", out) {}

template <typename T>
Matrix<T> EdgeConv<T>::aggregate(const Matrix<T>& x, const Adjacency& adj,
                                 Cache* cache) const {
  check_rows(x, adj, "edge_conv");
  const std::size_t d = x.cols();
  if (lin1_weight.value.rows() != 2 * d) {
    fail(ErrorKind::kDimension, "edge_conv '" + lin1_weight.name +
                                    "': input " + x.shape() +
                                    " does not match weight " +
                                    lin1_weight.value.shape());
  }
  const std::size_t hidden = lin1_weight.value.cols();
  Matrix<T> proj_self = matmul(x, slice_rows(lin1_weight.value, 0, d));
  add_bias_rows(proj_self, lin1_bias);
  Matrix<T> proj_nbr = matmul(x, slice_rows(lin1_weight.value, d, d));

  Matrix<T> hidden_sum(x.rows(), hidden);
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    auto s = hidden_sum.row(v);
    auto ps = proj_self.row(v);
    for (std::uint32_t w : adj.in_neighbors(v)) {
      auto pn = proj_nbr.row(w);
      for (std::size_t k = 0; k < hidden; ++k) {
        s[k] += std::max(ps[k] + pn[k], T{0});
      }
    }
  }
  Matrix<T> out = matmul(hidden_sum, lin2_weight.value);
  const auto b2 = lin2_bias.value.row(0);
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    const T degree = static_cast<T>(adj.in_neighbors(v).size());
    auto o = out.row(v);
    for (std::size_t k = 0; k < o.size(); ++k) o[k] += degree * b2[k];
  }
  if (cache) {
    cache->adj = &adj;
    cache->input = x;
    cache->proj_self = std::move(proj_self);
    cache->proj_nbr = std::move(proj_nbr);
    cache->hidden_sum = std::move(hidden_sum);
  }
  return out;
}

template <typename T>
Matrix<T> EdgeConv<T>::forward(const Matrix<T>& x, const Adjacency& adj,
                               Mode mode, Cache* cache) {
  Matrix<T> pre = aggregate(x, adj, cache);
  return relu(batchnorm_forward(pre, bn, mode, cache ? &cache->norm : nullptr),
              cache ? &cache->act : nullptr);
}

template <typename T>
Matrix<T> EdgeConv<T>::infer(const Matrix<T>& x, const Adjacency& adj) const {
  return relu(batchnorm_infer(aggregate(x, adj), bn));
}

template <typename T>
Matrix<T> EdgeConv<T>::backward(const Matrix<T>& grad_out, Cache& cache) {
  if (!cache.input || !cache.adj) {
    fail(ErrorKind::kState, "edge_conv '" + lin1_weight.name +
                                "': backward called without a cached forward");
  }
  const Adjacency& adj = *cache.adj;
  const Matrix<T>& x = *cache.input;
  const std::size_t d = x.cols();
  const std::size_t hidden = lin1_weight.value.cols();

  const Matrix<T> grad_pre =
      batchnorm_backward(relu_backward(grad_out, cache.act), cache.norm, bn);

  // Second linear, pulled out of the neighbour sum.
  add_inplace(lin2_weight.grad, matmul_tn(cache.hidden_sum, grad_pre));
  auto gb2 = lin2_bias.grad.row(0);
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    const T degree = static_cast<T>(adj.in_neighbors(v).size());
    auto g = grad_pre.row(v);
    for (std::size_t k = 0; k < g.size(); ++k) gb2[k] += degree * g[k];
  }
  const Matrix<T> grad_sum = matmul_nt(grad_pre, lin2_weight.value);

  // Per-edge ReLU mask, recomputed from the cached projections.
  Matrix<T> grad_self(x.rows(), hidden);
  Matrix<T> grad_nbr(x.rows(), hidden);
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    auto gs = grad_sum.row(v);
    auto ps = cache.proj_self.row(v);
    auto out_self = grad_self.row(v);
    for (std::uint32_t w : adj.in_neighbors(v)) {
      auto pn = cache.proj_nbr.row(w);
      auto out_nbr = grad_nbr.row(w);
      for (std::size_t k = 0; k < hidden; ++k) {
        if (ps[k] + pn[k] > T{0}) {
          out_self[k] += gs[k];
          out_nbr[k] += gs[k];
        }
      }
    }
  }
  accumulate_colsum(lin1_bias, grad_self);
  accumulate_rows(lin1_weight, 0, matmul_tn(x, grad_self));
  accumulate_rows(lin1_weight, d, matmul_tn(x, grad_nbr));
  Matrix<T> grad_x = matmul_nt(grad_self, slice_rows(lin1_weight.value, 0, d));
  add_inplace(grad_x, matmul_nt(grad_nbr, slice_rows(lin1_weight.value, d, d)));
  cache.input.reset();
  return grad_x;
}

template <typename T>
void EdgeConv<T>::collect(std::vector<ParamTensor<T>*>& out) {
  out.push_back(&lin1_weight);
  out.push_back(&lin1_bias);
  out.push_back(&lin2_weight);
  out.push_back(&lin2_bias);
  out.push_back(&bn.gamma);
  out.push_back(&bn.beta);
}

// ---------------------------------------------------------------------------
// Maxpool and inception

template <typename T>
Matrix<T> neighbor_maxpool(const Matrix<T>& x, const Adjacency& adj,
                           std::vector<std::uint32_t>* argmax) {
  check_rows(x, adj, "maxpool");
  const std::size_t d = x.cols();
  Matrix<T> out(x.rows(), d);
  if (argmax) argmax->assign(x.rows() * d, 0);
  for (std::size_t v = 0; v < adj.node_count; ++v) {
    const auto nbrs = adj.in_neighbors(v);
    auto o = out.row(v);
    if (nbrs.empty()) continue;
    for (std::size_t k = 0; k < d; ++k) {
      std::uint32_t best = nbrs[0];
      T best_value = x(best, k);
      for (std::size_t i = 1; i < nbrs.size(); ++i) {
        const T value = x(nbrs[i], k);
        if (value > best_value) {
          best_value = value;
          best = nbrs[i];
        }
      }
      o[k] = best_value;
      if (argmax) (*argmax)[v * d + k] = best;
    }
  }
  return out;
}

template <typename T>
InceptionLayer<T>::InceptionLayer(const std::string& prefix, std::size_t width)
    : branches{SageConv<T>(prefix + ".sage_quarter", width,
                           std::max<std::size_t>(1, width / 4), false),
               SageConv<T>(prefix + ".sage_half", width,
                           std::max<std::size_t>(1, width / 2), false),
               SageConv<T>(prefix + ".sage_full", width, width, false)} {
  projection = Dense<T>(prefix + ".proj", concat_width(), width, true);
}

template <typename T>
std::size_t InceptionLayer<T>::concat_width() const noexcept {
  std::size_t total = branches[2].weight.value.rows();  // maxpool keeps width
  for (const auto& b : branches) total += b.weight.value.cols();
  return total;
}

template <typename T>
Matrix<T> InceptionLayer<T>::forward(const Matrix<T>& x, const Adjacency& adj,
                                     Mode mode, Cache* cache) {
  Matrix<T> joined = neighbor_maxpool(x, adj, cache ? &cache->argmax : nullptr);
  for (std::size_t b = 3; b-- > 0;) {
    joined = hconcat(branches[b].forward(x, adj, mode,
                                         cache ? &cache->branch[b] : nullptr),
                     joined);
  }
  if (cache) {
    cache->adj = &adj;
    cache->width = x.cols();
  }
  return projection.forward(joined, mode, cache ? &cache->projection : nullptr);
}

template <typename T>
Matrix<T> InceptionLayer<T>::infer(const Matrix<T>& x,
                                   const Adjacency& adj) const {
  Matrix<T> joined = neighbor_maxpool(x, adj);
  for (std::size_t b = 3; b-- > 0;) {
    joined = hconcat(branches[b].infer(x, adj), joined);
  }
  return projection.infer(joined);
}

template <typename T>
Matrix<T> InceptionLayer<T>::backward(const Matrix<T>& grad_out, Cache& cache) {
  if (!cache.adj) {
    fail(ErrorKind::kState,
         "inception: backward called without a cached forward");
  }
  const Matrix<T> grad_joined = projection.backward(grad_out, cache.projection);
  const std::size_t d = cache.width;
  Matrix<T> grad_x(grad_joined.rows(), d);
  std::size_t offset = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t w = branches[b].weight.value.cols();
    add_inplace(grad_x, branches[b].backward(
                            slice_cols(grad_joined, offset, w), cache.branch[b]));
    offset += w;
  }
  for (std::size_t v = 0; v < grad_joined.rows(); ++v) {
    if (cache.adj->in_neighbors(v).empty()) continue;
    auto g = grad_joined.row(v);
    for (std::size_t k = 0; k < d; ++k) {
      grad_x(cache.argmax[v * d + k], k) += g[offset + k];
    }
  }
  cache.adj = nullptr;
  return grad_x;
}

template <typename T>
void InceptionLayer<T>::collect(std::vector<ParamTensor<T>*>& out) {
  for (auto& b : branches) b.collect(out);
  projection.collect(out);
}

#define SPELL_INSTANTIATE(T)                                           \
  template struct Dense<T>;                                            \
  template struct SageConv<T>;                                         \
  template struct EdgeConv<T>;                                         \
  template struct InceptionLayer<T>;                                   \
  template Matrix<T> neighbor_maxpool(const Matrix<T>&, const Adjacency&, \
                                      std::vector<std::uint32_t>*);

SPELL_INSTANTIATE(float)
SPELL_INSTANTIATE(double)

#undef SPELL_INSTANTIATE

}  // namespace spell
