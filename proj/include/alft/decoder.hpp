#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "alft/anchors.hpp"
#include "alft/depthfield.hpp"
#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/ops.hpp"
#include "alft/diffcore/params.hpp"

namespace alft {

struct DecoderConfig {
  int layers = 3;
  int heads = 4;
  int model_dim = 64;     // C
  int sample_points = 4;  // N per anchor per head
  int ffn_mult = 2;
  int pe_freqs = 4;
  bool shared_offsets = false;  // one offset set for all heads instead of one per head
  bool depth_attention = true;

  void validate() const {
    if (layers < 0 || heads < 1 || sample_points < 1 || model_dim < 1)
      throw ContractViolation("decoder: layers >= 0, heads >= 1, sample_points >= 1 required");
    if (model_dim % heads != 0) throw ContractViolation("decoder: model_dim must be divisible by heads");
  }
};

/// Volume source for deformable cross-attention: the fused sparse lift of a
/// token set. Values are projected per layer before lifting.
struct LiftSource {
  ad::Var tokens;  // N_F x C_I
  ad::Var dists;   // N_E x K
  std::shared_ptr<const ad::LiftLayout> layout;
};

/// Optional capture of intermediate attention weights, for checks.
struct AttentionTrace {
  std::vector<ad::Var> depth_cross;  // per layer, per head: A x T_D
  std::vector<ad::Var> self;         // per layer, per head: A x A
  std::vector<ad::Var> deformable;   // per layer: (A heads) x N
};

/// Query-table row of each anchor: 0 for global, 1 + j K + k for local (j, k).
inline std::vector<int> provenance_rows(const std::vector<AnchorTag>& tags, int per_joint) {
  std::vector<int> rows;
  rows.reserve(tags.size());
  for (const auto& t : tags) rows.push_back(t.global ? 0 : 1 + t.joint * per_joint + t.slot);
  return rows;
}

namespace detail {

inline void add_attention(ad::ParameterStore& s, const std::string& p, int q_in, int kv_in, int C, Rng& rng) {
  add_linear(s, p + ".q", q_in, C, rng);
  add_linear(s, p + ".k", kv_in, C, rng);
  add_linear(s, p + ".v", kv_in, C, rng);
  add_linear(s, p + ".o", C, C, rng);
}

inline void add_ffn(ad::ParameterStore& s, const std::string& p, int C, int mult, Rng& rng) {
  add_linear(s, p + ".fc1", C, mult * C, rng);
  add_linear(s, p + ".fc2", mult * C, C, rng);
}

inline ad::Var apply_ffn(ad::Graph& g, ad::ParameterStore& s, const std::string& p, ad::Var x) {
  return apply_linear(g, s, p + ".fc2", ad::gelu(apply_linear(g, s, p + ".fc1", x)));
}

}  // namespace detail

/// Registers "decoder.*". token_dim is C_I; local_rows = N_J K local anchors.
inline void register_decoder_params(ad::ParameterStore& s, const DecoderConfig& cfg, int local_rows, int token_dim, Rng& rng) {
  cfg.validate();
  const int C = cfg.model_dim, H = cfg.heads, N = cfg.sample_points;
  s.add_uniform("decoder.query.table", ad::Shape{1 + local_rows, C}, 1, rng, 0.5);
  detail::add_linear(s, "decoder.query.pos", 6 * cfg.pe_freqs, C, rng);
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    if (cfg.depth_attention) {
      detail::add_layer_norm(s, p + ".dca_norm", C);
      detail::add_attention(s, p + ".depth", C, C, C, rng);
    }
    detail::add_layer_norm(s, p + ".sa_norm", C);
    detail::add_attention(s, p + ".self", C, C, C, rng);
    detail::add_layer_norm(s, p + ".ffn_a_norm", C);
    detail::add_ffn(s, p + ".ffn_a", C, cfg.ffn_mult, rng);
    detail::add_layer_norm(s, p + ".def_norm", C);
    const int off_sets = cfg.shared_offsets ? 1 : H;
    // Tiny random weights: sampling starts at the anchor, but the N points can drift apart.
    s.add_uniform(p + ".def.offset.w", ad::Shape{C, off_sets * N * 3}, C, rng, 0.01);
    s.add(p + ".def.offset.b", ad::Shape{off_sets * N * 3});
    s.add(p + ".def.weight.w", ad::Shape{C, H * N});
    s.add(p + ".def.weight.b", ad::Shape{H * N});
    detail::add_linear(s, p + ".def.value", token_dim, C, rng);
    detail::add_linear(s, p + ".def.out", C, C, rng);
    detail::add_layer_norm(s, p + ".ffn_b_norm", C);
    detail::add_ffn(s, p + ".ffn_b", C, cfg.ffn_mult, rng);
  }
  if (cfg.layers > 0) detail::add_layer_norm(s, "decoder.final_norm", C);
}

/// Q_anchor = table[provenance] + Linear(sinusoid(P_A)).
inline ad::Var encode_anchor_queries(ad::Var positions, const std::vector<int>& prov_rows, ad::ParameterStore& s,
                                     const DecoderConfig& cfg) {
  ad::Graph& g = positions.graph();
  ad::Var base = ad::gather_rows(g.param(s.at("decoder.query.table")), prov_rows);
  ad::Var pe = detail::apply_linear(g, s, "decoder.query.pos", ad::sinusoid_encode(positions, cfg.pe_freqs));
  return ad::add(base, pe);
}

/// Multi-head scaled dot-product attention of queries x over keys/values kv,
/// followed by the output projection. Returns the projected result (no residual).
inline ad::Var multi_head_attention(ad::Graph& g, ad::ParameterStore& s, const std::string& p, ad::Var x, ad::Var kv, int heads,
                                    std::vector<ad::Var>* trace = nullptr) {
  ad::Var q = detail::apply_linear(g, s, p + ".q", x);
  ad::Var k = detail::apply_linear(g, s, p + ".k", kv);
  ad::Var v = detail::apply_linear(g, s, p + ".v", kv);
  const int C = q.cols(), dh = C / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, (h + 1) * dh);
    ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, (h + 1) * dh);
    ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, (h + 1) * dh);
    ad::Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv));
    if (trace) trace->push_back(att);
    outs.push_back(ad::matmul(att, vh));
  }
  return detail::apply_linear(g, s, p + ".o", heads == 1 ? outs.front() : ad::concat_cols(outs));
}

/// q + MHA(LN(q), F_D) for layer i.
inline ad::Var depth_cross_attention(ad::Var q, ad::Var depth_embedding, ad::ParameterStore& s, const DecoderConfig& cfg, int layer,
                                     AttentionTrace* trace = nullptr) {
  ad::Graph& g = q.graph();
  const std::string p = "decoder.layer" + std::to_string(layer);
  ad::Var n = detail::apply_layer_norm(g, s, p + ".dca_norm", q);
  return ad::add(q, multi_head_attention(g, s, p + ".depth", n, depth_embedding, cfg.heads, trace ? &trace->depth_cross : nullptr));
}

/// q + MHA(LN(q), LN(q)) for layer i.
inline ad::Var anchor_self_attention(ad::Var q, ad::ParameterStore& s, const DecoderConfig& cfg, int layer,
                                     AttentionTrace* trace = nullptr) {
  ad::Graph& g = q.graph();
  const std::string p = "decoder.layer" + std::to_string(layer);
  ad::Var n = detail::apply_layer_norm(g, s, p + ".sa_norm", q);
  return ad::add(q, multi_head_attention(g, s, p + ".self", n, n, cfg.heads, trace ? &trace->self : nullptr));
}

/// Sampling points P_a + dS for every (anchor, head, point), as (A H N) x 3.
inline ad::Var deformable_points(ad::Graph& g, ad::ParameterStore& s, const std::string& p, ad::Var n, ad::Var reference,
                                 const DecoderConfig& cfg) {
  const int A = n.rows(), H = cfg.heads, N = cfg.sample_points;
  ad::Var off = detail::apply_linear(g, s, p + ".def.offset", n);
  for (double v : off.value())
    if (!std::isfinite(v)) throw ParameterHealthError("deformable offset head produced a non-finite offset");
  std::vector<int> rep_anchor, rep_offset;
  rep_anchor.reserve(static_cast<std::size_t>(A * H * N));
  for (int a = 0; a < A; ++a)
    for (int h = 0; h < H; ++h)
      for (int k = 0; k < N; ++k) {
        rep_anchor.push_back(a);
        rep_offset.push_back(a * (cfg.shared_offsets ? N : H * N) + (cfg.shared_offsets ? k : h * N + k));
      }
  ad::Var offsets = ad::gather_rows(ad::reshape(off, ad::Shape{A * (cfg.shared_offsets ? 1 : H) * N, 3}), std::move(rep_offset));
  return ad::add(ad::gather_rows(reference, std::move(rep_anchor)), offsets);
}

/// Softmax weights over the N points of every (anchor, head): (A H) x N.
inline ad::Var deformable_weights(ad::Graph& g, ad::ParameterStore& s, const std::string& p, ad::Var n, const DecoderConfig& cfg) {
  const int A = n.rows();
  return ad::softmax_rows(ad::reshape(detail::apply_linear(g, s, p + ".def.weight", n), ad::Shape{A * cfg.heads, cfg.sample_points}));
}

/// Per-head weighted sum of volume samples before the output projection, A x C.
/// `sample` maps (A H N) x 3 points to (A H N) x (C / H) head-sliced features.
template <typename Sampler>
ad::Var deformable_aggregate(ad::Var weights, ad::Var points, Sampler&& sample, int anchors, int C) {
  ad::Var sampled = sample(points);
  return ad::reshape(ad::group_weighted_sum(sampled, weights), ad::Shape{anchors, C});
}

/// q + Out(sum_n W_n phi(F_3D, P_a + dS_n)) for layer i, reading the fused lift.
inline ad::Var deformable_cross_attention_3d(ad::Var q, ad::Var reference, const LiftSource& src, ad::ParameterStore& s,
                                             const DecoderConfig& cfg, int layer, AttentionTrace* trace = nullptr) {
  ad::Graph& g = q.graph();
  const std::string p = "decoder.layer" + std::to_string(layer);
  const int A = q.rows(), C = cfg.model_dim;
  ad::Var n = detail::apply_layer_norm(g, s, p + ".def_norm", q);
  ad::Var points = deformable_points(g, s, p, n, reference, cfg);
  ad::Var weights = deformable_weights(g, s, p, n, cfg);
  if (trace) trace->deformable.push_back(weights);
  ad::Var values = detail::apply_linear(g, s, p + ".def.value", src.tokens);
  ad::Var agg = deformable_aggregate(
      weights, points,
      [&](ad::Var pts) { return ad::lifted_sample(values, src.dists, src.layout, pts, cfg.heads, cfg.sample_points); }, A, C);
  return ad::add(q, detail::apply_linear(g, s, p + ".def.out", agg));
}

inline ad::Var feed_forward(ad::Var q, ad::ParameterStore& s, int layer, const char* which) {
  ad::Graph& g = q.graph();
  const std::string p = "decoder.layer" + std::to_string(layer) + "." + which;
  return ad::add(q, detail::apply_ffn(g, s, p, detail::apply_layer_norm(g, s, p + "_norm", q)));
}

/// Encoded queries through `layers` blocks of depth cross-attention,
/// self-attention, FFN, deformable cross-attention, FFN; final layer norm.
inline ad::Var decode(ad::Var positions, const std::vector<int>& prov_rows, ad::Var depth_embedding, const LiftSource& src,
                      ad::ParameterStore& s, const DecoderConfig& cfg, AttentionTrace* trace = nullptr) {
  cfg.validate();
  ad::Graph& g = positions.graph();
  ad::Var q = encode_anchor_queries(positions, prov_rows, s, cfg);
  for (int i = 0; i < cfg.layers; ++i) {
    if (cfg.depth_attention && depth_embedding.valid()) q = depth_cross_attention(q, depth_embedding, s, cfg, i, trace);
    q = anchor_self_attention(q, s, cfg, i, trace);
    q = feed_forward(q, s, i, "ffn_a");
    q = deformable_cross_attention_3d(q, positions, src, s, cfg, i, trace);
    q = feed_forward(q, s, i, "ffn_b");
  }
  if (cfg.layers > 0) q = detail::apply_layer_norm(g, s, "decoder.final_norm", q);
  return q;
}

}  // namespace alft
