#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>

#include "alft/decoder.hpp"
#include "alft/diffcore/gradcheck.hpp"
#include "alft/sampler.hpp"
#include "support.hpp"

using namespace alft;

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_mat(std::span<const double> v, int r, int c) { return Eigen::Map<const Mat>(v.data(), r, c); }
Mat to_mat(ad::Var v) { return to_mat(v.value(), v.rows(), v.cols()); }

void randomize(ad::ParameterStore& s, Rng& rng, double spread) {
  for (std::size_t i = 0; i < s.count(); ++i)
    for (double& v : s[i].value) v = rng.uniform(-spread, spread);
}

Mat linear_oracle(const Mat& x, ad::ParameterStore& s, const std::string& p) {
  const auto& w = s.at(p + ".w");
  Mat out = x * to_mat(w.value, w.shape[0], w.shape[1]);
  const auto& b = s.at(p + ".b").value;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) += b[static_cast<std::size_t>(c)];
  return out;
}

Mat mha_oracle(const Mat& x, const Mat& kv, ad::ParameterStore& s, const std::string& p, int heads) {
  const Mat q = linear_oracle(x, s, p + ".q"), k = linear_oracle(kv, s, p + ".k"), v = linear_oracle(kv, s, p + ".v");
  const int C = static_cast<int>(q.cols()), dh = C / heads;
  Mat cat(x.rows(), C);
  for (int h = 0; h < heads; ++h) {
    Mat logits = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(static_cast<double>(dh));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      const double m = logits.row(r).maxCoeff();
      logits.row(r) = (logits.row(r).array() - m).exp();
      logits.row(r) /= logits.row(r).sum();
    }
    cat.middleCols(h * dh, dh) = logits * v.middleCols(h * dh, dh);
  }
  return linear_oracle(cat, s, p + ".o");
}

struct Scene {
  FeaturePyramid pyramid;
  TokenSelection selection;
  DepthBinning binning{1.0, 1.0, 4};
};

Scene scene(Rng& rng, int joints) {
  Scene sc;
  for (int s = 8; s >= 2; s /= 2) sc.pyramid.levels.push_back(alft::testing::random_tensor(rng, ad::Shape{s, s, 2}));
  Coords2 pose(joints, 2);
  for (int j = 0; j < joints; ++j) pose.row(j) << rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7);
  sc.selection = select_tokens(sc.pyramid, pose, SamplerConfig{});
  return sc;
}

ad::Tensor random_dists(Rng& rng, int rows, int K) {
  ad::Tensor t = alft::testing::random_tensor(rng, ad::Shape{rows, K}, 0.05, 1.0);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += t.data[static_cast<std::size_t>(r * K + k)];
    for (int k = 0; k < K; ++k) t.data[static_cast<std::size_t>(r * K + k)] /= s;
  }
  return t;
}

DecoderConfig small_config(int layers = 1) {
  DecoderConfig cfg;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.model_dim = 8;
  cfg.sample_points = 2;
  cfg.pe_freqs = 2;
  return cfg;
}

}  // namespace

TEST(Attention, MatchesDenseOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int heads = 1 + static_cast<int>(rng.below(3));
    const int C = heads * (1 + static_cast<int>(rng.below(3)));
    const int A = 1 + static_cast<int>(rng.below(5)), T = 1 + static_cast<int>(rng.below(5));
    ad::ParameterStore s;
    detail::add_attention(s, "att", C, C, C, rng);
    randomize(s, rng, 0.8);
    const ad::Tensor x = alft::testing::random_tensor(rng, ad::Shape{A, C});
    const ad::Tensor kv = alft::testing::random_tensor(rng, ad::Shape{T, C});
    ad::Graph g;
    const Mat got = to_mat(multi_head_attention(g, s, "att", g.constant(x), g.constant(kv), heads));
    const Mat want = mha_oracle(to_mat(x.data, A, C), to_mat(kv.data, T, C), s, "att", heads);
    ASSERT_EQ(got.rows(), A);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Attention, TwoTokensHandComputed) {
  // One head, C = 1, identity projections: weights are softmax(q k_t).
  ad::ParameterStore s;
  Rng rng(2);
  detail::add_attention(s, "att", 1, 1, 1, rng);
  for (const char* p : {"att.q.w", "att.k.w", "att.v.w", "att.o.w"}) s.at(p).value = {1.0};
  for (const char* p : {"att.q.b", "att.k.b", "att.v.b", "att.o.b"}) s.at(p).value = {0.0};
  ad::Graph g;
  std::vector<ad::Var> trace;
  ad::Var out = multi_head_attention(g, s, "att", g.constant(ad::Shape{1, 1}, {2.0}), g.constant(ad::Shape{2, 1}, {0.0, 1.0}), 1, &trace);
  const double w1 = std::exp(2.0) / (1.0 + std::exp(2.0));
  ASSERT_EQ(trace.size(), 1U);
  EXPECT_NEAR(trace[0].at(1), w1, 1e-15);
  EXPECT_NEAR(out.item(), w1, 1e-15);
}

TEST(Attention, WeightRowsSumToOne) {
  Rng rng(3);
  DecoderConfig cfg = small_config(2);
  ad::ParameterStore s;
  register_decoder_params(s, cfg, 4, 3, rng);
  randomize(s, rng, 0.5);
  Scene sc = scene(rng, 2);
  ad::Graph g;
  const LiftSource src{g.constant(alft::testing::random_tensor(rng, ad::Shape{sc.selection.token_count(), 3})),
                       g.constant(random_dists(rng, sc.selection.entry_count(), sc.binning.k_bins)),
                       build_lift_layout(sc.selection, sc.binning)};
  AttentionTrace trace;
  decode(g.constant(alft::testing::random_tensor(rng, ad::Shape{5, 3})), {0, 1, 2, 3, 4}, g.constant(alft::testing::random_tensor(rng, ad::Shape{7, 8})),
         src, s, cfg, &trace);
  EXPECT_EQ(trace.depth_cross.size(), 4U);
  EXPECT_EQ(trace.self.size(), 4U);
  EXPECT_EQ(trace.deformable.size(), 2U);
  for (const auto* group : {&trace.depth_cross, &trace.self, &trace.deformable})
    for (ad::Var w : *group)
      for (int r = 0; r < w.rows(); ++r) {
        double sum = 0.0;
        for (int c = 0; c < w.cols(); ++c) {
          const double v = w.at(static_cast<std::size_t>(r * w.cols() + c));
          EXPECT_GE(v, 0.0);
          sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
}

TEST(SelfAttention, PermutationEquivariant) {
  Rng rng(4);
  DecoderConfig cfg = small_config();
  ad::ParameterStore s;
  register_decoder_params(s, cfg, 4, 3, rng);
  randomize(s, rng, 0.7);
  for (int trial = 0; trial < 20; ++trial) {
    const int A = 2 + static_cast<int>(rng.below(6));
    const ad::Tensor q = alft::testing::random_tensor(rng, ad::Shape{A, 8});
    std::vector<int> perm(static_cast<std::size_t>(A));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = A - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
    ad::Graph g;
    const Mat base = to_mat(anchor_self_attention(g.constant(q), s, cfg, 0));
    const Mat moved = to_mat(anchor_self_attention(ad::gather_rows(g.constant(q), perm), s, cfg, 0));
    for (int a = 0; a < A; ++a) EXPECT_LT((moved.row(a) - base.row(perm[static_cast<std::size_t>(a)])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Queries, ProvenanceRowsAndEncodingOracle) {
  const std::vector<AnchorTag> tags = {{true, -1, -1}, {false, 0, 0}, {false, 0, 1}, {false, 2, 1}};
  EXPECT_EQ(provenance_rows(tags, 2), (std::vector<int>{0, 1, 2, 6}));
  Rng rng(5);
  DecoderConfig cfg = small_config(0);
  ad::ParameterStore s;
  register_decoder_params(s, cfg, 6, 3, rng);
  randomize(s, rng, 0.5);
  const ad::Tensor pos = alft::testing::random_tensor(rng, ad::Shape{4, 3});
  ad::Graph g;
  const LiftSource none{};
  const Mat got = to_mat(decode(g.constant(pos), provenance_rows(tags, 2), ad::Var{}, none, s, cfg));
  const auto& table = s.at("decoder.query.table");
  const Mat tab = to_mat(table.value, table.shape[0], table.shape[1]);
  for (int a = 0; a < 4; ++a) {
    Mat pe(1, 12);
    for (int ax = 0; ax < 3; ++ax)
      for (int f = 0; f < 2; ++f) {
        const double t = M_PI * std::pow(2.0, f) * pos.data[static_cast<std::size_t>(a * 3 + ax)];
        pe(0, (ax * 2 + f) * 2) = std::sin(t);
        pe(0, (ax * 2 + f) * 2 + 1) = std::cos(t);
      }
    const Mat want = tab.row(provenance_rows(tags, 2)[static_cast<std::size_t>(a)]) + linear_oracle(pe, s, "decoder.query.pos");
    EXPECT_LT((got.row(a) - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Deformable, FreshOffsetsStayNearAnchorAndWeightsUniform) {
  Rng rng(6);
  DecoderConfig cfg = small_config();
  ad::ParameterStore s;
  register_decoder_params(s, cfg, 4, 3, rng);
  const ad::Tensor q = alft::testing::random_tensor(rng, ad::Shape{3, 8});
  const ad::Tensor ref = alft::testing::random_tensor(rng, ad::Shape{3, 3}, -0.5, 0.5);
  ad::Graph g;
  ad::Var n = detail::apply_layer_norm(g, s, "decoder.layer0.def_norm", g.constant(q));
  ad::Var pts = deformable_points(g, s, "decoder.layer0", n, g.constant(ref), cfg);
  ad::Var w = deformable_weights(g, s, "decoder.layer0", n, cfg);
  ASSERT_EQ(pts.rows(), 3 * 2 * 2);
  for (int m = 0; m < pts.rows(); ++m)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(pts.at(static_cast<std::size_t>(m * 3 + c)), ref.data[static_cast<std::size_t>(m / 4 * 3 + c)], 0.05);
  for (double v : w.value()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Deformable, SharedOffsetsRepeatAcrossHeads) {
  Rng rng(7);
  DecoderConfig cfg = small_config();
  cfg.shared_offsets = true;
  ad::ParameterStore s;
  register_decoder_params(s, cfg, 4, 3, rng);
  randomize(s, rng, 0.5);
  ad::Graph g;
  ad::Var n = g.constant(alft::testing::random_tensor(rng, ad::Shape{2, 8}));
  ad::Var pts = deformable_points(g, s, "decoder.layer0", n, g.constant(alft::testing::random_tensor(rng, ad::Shape{2, 3})), cfg);
  for (int a = 0; a < 2; ++a)
    for (int k = 0; k < 2; ++k)
      for (int c = 0; c < 3; ++c)
        EXPECT_EQ(pts.at(static_cast<std::size_t>(((a * 2 + 0) * 2 + k) * 3 + c)), pts.at(static_cast<std::size_t>(((a * 2 + 1) * 2 + k) * 3 + c)));
}

TEST(Deformable, AggregateMatchesDenseVolumeOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    Scene sc = scene(rng, 1 + static_cast<int>(rng.below(3)));
    const int H = 1 + static_cast<int>(rng.below(2)), N = 1 + static_cast<int>(rng.below(3)), dh = 2, C = H * dh;
    const int A = 1 + static_cast<int>(rng.below(3)), K = sc.binning.k_bins;
    ad::Graph g;
    ad::Var vals = g.constant(alft::testing::random_tensor(rng, ad::Shape{sc.selection.token_count(), C}));
    ad::Var dists = g.constant(random_dists(rng, sc.selection.entry_count(), K));
    ad::Tensor pts = alft::testing::random_tensor(rng, ad::Shape{A * H * N, 3}, -0.9, 0.9);
    ad::Var w = ad::softmax_rows(g.constant(alft::testing::random_tensor(rng, ad::Shape{A * H, N}, -2, 2)));
    const auto layout = build_lift_layout(sc.selection, sc.binning);
    ad::Var got = deformable_aggregate(
        w, g.constant(pts), [&](ad::Var p) { return ad::lifted_sample(vals, dists, layout, p, H, N); }, A, C);

    // Dense oracle: materialize every level's volume, trilinear-read by hand.
    const auto vols = lift_features(vals, dists, sc.selection);
    auto read = [&](int m, int ch) {
      double acc = 0.0;
      for (const auto& v : vols) {
        const int S = v.shape()[0];
        auto axis = [](double x, int n) {
          double u = (x + 1.0) * 0.5 * n - 0.5;
          u = std::clamp(u, 0.0, static_cast<double>(n - 1));
          const int i0 = std::min(static_cast<int>(std::floor(u)), n - 1), i1 = std::min(i0 + 1, n - 1);
          return std::tuple<int, int, double>{i0, i1, u - i0};
        };
        const auto [x0, x1, tx] = axis(pts.data[static_cast<std::size_t>(m * 3)], S);
        const auto [y0, y1, ty] = axis(pts.data[static_cast<std::size_t>(m * 3 + 1)], S);
        const auto [z0, z1, tz] = axis(pts.data[static_cast<std::size_t>(m * 3 + 2)], K);
        auto at = [&](int y, int x, int z) { return v.at(static_cast<std::size_t>(((y * S + x) * K + z) * C + ch)); };
        double val = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            for (int dz = 0; dz < 2; ++dz)
              val += (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx) * (dz ? tz : 1 - tz) * at(dy ? y1 : y0, dx ? x1 : x0, dz ? z1 : z0);
        acc += val / static_cast<double>(vols.size());
      }
      return acc;
    };
    for (int a = 0; a < A; ++a)
      for (int h = 0; h < H; ++h)
        for (int c = 0; c < dh; ++c) {
          double want = 0.0;
          for (int k = 0; k < N; ++k) want += w.at(static_cast<std::size_t>((a * H + h) * N + k)) * read((a * H + h) * N + k, h * dh + c);
          EXPECT_NEAR(got.at(static_cast<std::size_t>(a * C + h * dh + c)), want, 1e-10);
        }
  }
}

TEST(Deformable, NonFiniteOffsetRaisesHealthError) {
  Rng rng(9);
  DecoderConfig cfg = small_config();
  ad::ParameterStore s;
  register_decoder_params(s, cfg, 4, 3, rng);
  s.at("decoder.layer0.def.offset.b").value[0] = std::numeric_limits<double>::infinity();
  ad::Graph g;
  ad::Var n = g.constant(alft::testing::random_tensor(rng, ad::Shape{2, 8}));
  EXPECT_THROW(deformable_points(g, s, "decoder.layer0", n, g.constant(ad::Tensor(ad::Shape{2, 3})), cfg), ParameterHealthError);
}

TEST(Decoder, ConfigValidation) {
  DecoderConfig cfg;
  cfg.model_dim = 10;
  cfg.heads = 4;
  EXPECT_THROW(cfg.validate(), ContractViolation);
  cfg = DecoderConfig{};
  cfg.sample_points = 0;
  EXPECT_THROW(cfg.validate(), ContractViolation);
}

class DecoderGrad : public ::testing::Test {
 protected:
  void check(bool depth_attention) {
    Rng rng(10);
    DecoderConfig cfg = small_config(2);
    cfg.depth_attention = depth_attention;
    ad::ParameterStore s;
    register_decoder_params(s, cfg, 4, 3, rng);
    randomize(s, rng, 0.4);
    for (std::size_t i = 0; i < s.count(); ++i)
      if (s[i].name.find("def.offset") != std::string::npos)
        for (double& v : s[i].value) v *= 0.3;
    Scene sc = scene(rng, 2);
    const ad::Tensor pos = alft::testing::random_tensor(rng, ad::Shape{6, 3}, -0.6, 0.6);
    const ad::Tensor tokens = alft::testing::random_tensor(rng, ad::Shape{sc.selection.token_count(), 3});
    const ad::Tensor dists = random_dists(rng, sc.selection.entry_count(), sc.binning.k_bins);
    const ad::Tensor emb = alft::testing::random_tensor(rng, ad::Shape{4, 8});
    const auto layout = build_lift_layout(sc.selection, sc.binning);
    const std::vector<int> prov = {0, 0, 1, 2, 3, 4};
    const auto rep = ad::grad_check_params(s, [&](ad::Graph& g) {
      const LiftSource src{g.constant(tokens), g.constant(dists), layout};
      return alft::testing::probe(decode(g.constant(pos), prov, g.constant(emb), src, s, cfg));
    }, 1e-5, [](const ad::Parameter& p) { return !p.name.ends_with(".k.b"); });  // key biases cancel in softmax
    EXPECT_LT(rep.max_relative_error, 1e-4) << rep.worst << " " << rep.worst_analytic << " " << rep.worst_numeric;
  }
};

TEST_F(DecoderGrad, WithDepthAttention) { check(true); }
TEST_F(DecoderGrad, WithoutDepthAttention) { check(false); }
