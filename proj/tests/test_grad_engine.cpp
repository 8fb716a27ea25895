#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "iapo/error.hpp"
#include "iapo/grad.hpp"
#include "kernels.hpp"
#include "support/fixtures.hpp"

using namespace iapo;
using iapo::testing::central_difference;
using iapo::testing::relative_error;
using iapo::testing::small_config;

namespace {

// Cross-entropy of next-token prediction plus a weighted logit term so every
// logit carries gradient.
SequenceLoss ce_loss(const std::vector<TokenSeq>& seqs) {
  return [&seqs](std::size_t idx, const Mat& logits, Mat& dlogits) {
    const TokenSeq& s = seqs[idx];
    double loss = 0.0;
    for (Eigen::Index r = 0; r + 1 < logits.rows(); ++r) {
      const RowVec lp = log_softmax(logits.row(r));
      const TokenId next = s[static_cast<std::size_t>(r + 1)];
      loss -= lp(next);
      dlogits.row(r) += lp.array().exp().matrix();
      dlogits(r, next) -= 1.0;
      loss += 0.01 * logits(r, 3);
      dlogits(r, 3) += 0.01;
    }
    return loss;
  };
}

std::vector<TokenSeq> sample_seqs(std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<TokenSeq> out;
  for (int i = 0; i < 3; ++i) {
    TokenSeq s(5 + rng.below(8));
    for (auto& t : s) t = static_cast<TokenId>(rng.below(tok::kPad));  // never PAD
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(Gelu, MatchesTanhFormulaAndItsDerivative) {
  using namespace iapo::kernels;
  iapo::Mat u(1, 801);
  for (int i = 0; i < 801; ++i) u(0, i) = -20.0 + 0.05 * i;
  const iapo::Mat g = gelu(u);
  const iapo::Mat dg = gelu_grad(u);
  for (int i = 0; i < 801; ++i) {
    const double x = u(0, i);
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    EXPECT_NEAR(g(0, i), 0.5 * x * (1.0 + t), 1e-14 * std::max(1.0, std::abs(x)));
    const double ref = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    EXPECT_NEAR(dg(0, i), ref, 1e-13);
  }
  EXPECT_EQ(gelu(iapo::Mat::Zero(1, 1))(0, 0), 0.0);
  EXPECT_TRUE(gelu(iapo::Mat::Constant(1, 1, -1e3)).allFinite());
  EXPECT_DOUBLE_EQ(gelu(iapo::Mat::Constant(1, 1, 1e3))(0, 0), 1e3);
}

TEST(Backward, MatchesCentralDifferences) {
  const Params p = Params::random(small_config(), 21, 0.3);
  const auto seqs = sample_seqs(4);
  const auto loss = ce_loss(seqs);
  const LossAndGradients lg = backward_loss(p, seqs, loss);
  EXPECT_NEAR(lg.loss, evaluate_loss(p, seqs, loss), 1e-12);

  RngStream rng(99);
  int checked = 0;
  // Every tensor, then random coordinates.
  std::vector<std::size_t> coords;
  for (const auto& slot : p.layout().tensors()) {
    if (slot.name == "tok_embedding") {
      coords.push_back(slot.offset + rng.below(tok::kPad * static_cast<std::uint64_t>(p.config().d_model)));
    } else if (slot.name == "pos_embedding") {
      coords.push_back(slot.offset + rng.below(4 * static_cast<std::uint64_t>(p.config().d_model)));
    } else {
      coords.push_back(slot.offset + rng.below(slot.size()));
    }
  }
  while (coords.size() < 80) coords.push_back(rng.below(p.size()));
  for (std::size_t i : coords) {
    if (i >= p.layout().pos_embedding && i < p.layout().pos_embedding + p.layout().slot("pos_embedding").size() &&
        (i - p.layout().pos_embedding) / static_cast<std::size_t>(p.config().d_model) >= 12) {
      continue;  // positions beyond the longest sequence
    }
    const double fd = central_difference(p, i, 1e-3, [&](const Params& q) { return evaluate_loss(q, seqs, loss); });
    EXPECT_LE(relative_error(lg.grads[i], fd), 1e-3) << "coordinate " << i << " analytic " << lg.grads[i] << " fd " << fd;
    ++checked;
  }
  EXPECT_GE(checked, 50);
}

TEST(Backward, UnusedBlocksHaveZeroGradient) {
  const Params p = Params::random(small_config(), 22, 0.3);
  const auto seqs = sample_seqs(5);
  const LossAndGradients lg = backward_loss(p, seqs, ce_loss(seqs));
  const auto& L = p.layout();
  const auto d = static_cast<std::size_t>(p.config().d_model);
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(lg.grads[L.tok_embedding + tok::kPad * d + j], 0.0);
  // Positions past every sequence are never touched.
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(lg.grads[L.pos_embedding + 40 * d + j], 0.0);
}

TEST(Backward, LinearInLossScale) {
  const Params p = Params::random(small_config(), 23, 0.3);
  const auto seqs = sample_seqs(6);
  const auto base = ce_loss(seqs);
  const SequenceLoss doubled = [&](std::size_t i, const Mat& l, Mat& dl) {
    Mat tmp = Mat::Zero(dl.rows(), dl.cols());
    const double v = base(i, l, tmp);
    dl += 2.0 * tmp;
    return 2.0 * v;
  };
  const auto a = backward_loss(p, seqs, base);
  const auto b = backward_loss(p, seqs, doubled);
  EXPECT_NEAR(b.loss, 2.0 * a.loss, 1e-12);
  for (std::size_t i = 0; i < p.size(); ++i) ASSERT_NEAR(b.grads[i], 2.0 * a.grads[i], 1e-12);
}

TEST(Backward, NonFiniteLossRejected) {
  const Params p = Params::random(small_config(), 24, 0.3);
  const std::vector<TokenSeq> seqs{{1, 2, 3}};
  const SequenceLoss bad = [](std::size_t, const Mat&, Mat&) { return std::numeric_limits<double>::infinity(); };
  EXPECT_THROW(backward_loss(p, seqs, bad), NumericError);
}

TEST(ClipGradNorm, Cases) {
  const Params p(small_config());
  Gradients g(p);
  g[0] = 2.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 2.0);
  EXPECT_NEAR(g[0], 1.0, 1e-15);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-12);

  Gradients small(p);
  small[5] = 0.3;
  clip_grad_norm(small, 1.0);
  EXPECT_EQ(small[5], 0.3);

  Gradients zero(p);
  EXPECT_EQ(clip_grad_norm(zero, 1.0), 0.0);
  EXPECT_EQ(global_norm(zero), 0.0);

  Gradients big(p);
  for (std::size_t i = 0; i < big.size(); i += 7) big[i] = 0.1 * static_cast<double>(i % 13) - 0.5;
  clip_grad_norm(big, 1.0);
  const std::vector<double> once(big.values().begin(), big.values().end());
  clip_grad_norm(big, 1.0);
  EXPECT_LE(global_norm(big), 1.0 + 1e-9);
  for (std::size_t i = 0; i < big.size(); ++i) ASSERT_EQ(big[i], once[i]);
}

TEST(AdamW, ZeroGradientsLeaveParams) {
  Params p = Params::random(small_config(), 25);
  const Params before = p;
  AdamWState s = AdamWState::for_params(p, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  s.m.assign(s.m.size(), 0.5);
  Gradients g(p);
  adamw_step(p, s, g);
  EXPECT_EQ(s.step, 1u);
  for (double m : s.m) ASSERT_DOUBLE_EQ(m, 0.45);
  // The decayed moment still moves weights, but with m = 0 nothing changes.
  Params q = before;
  AdamWState z = AdamWState::for_params(q, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  adamw_step(q, z, g);
  for (std::size_t i = 0; i < q.size(); ++i) ASSERT_EQ(q[i], before[i]);
}

TEST(AdamW, ConstantGradientApproachesLr) {
  const ModelConfig c = small_config();
  Params p(c);
  AdamWState s = AdamWState::for_params(p, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  Gradients g(p);
  g[0] = 0.37;
  double last = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double before = p[0];
    adamw_step(p, s, g);
    last = before - p[0];
  }
  EXPECT_NEAR(last, 1e-3, 0.05e-3);
}

TEST(AdamW, WeightDecayClosedForm) {
  Params p = Params::random(small_config(), 26);
  const Params before = p;
  AdamWState s = AdamWState::for_params(p, {1e-2, 0.9, 0.999, 1e-8, 0.1});
  Gradients g(p);
  for (int i = 0; i < 3; ++i) adamw_step(p, s, g);
  const double f = std::pow(1.0 - 1e-2 * 0.1, 3);
  for (std::size_t i = 0; i < p.size(); ++i) ASSERT_NEAR(p[i], before[i] * f, 1e-15);
}

TEST(AdamW, ZeroLrIsIdentity) {
  Params p = Params::random(small_config(), 27);
  const Params before = p;
  AdamWState s = AdamWState::for_params(p, {0.0, 0.9, 0.999, 1e-8, 0.1});
  Gradients g(p);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 1.0;
  adamw_step(p, s, g);
  for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(p[i], before[i]);
}

TEST(AdamW, NonFiniteRejectedWithoutChange) {
  Params p = Params::random(small_config(), 28);
  const Params before = p;
  AdamWState s = AdamWState::for_params(p, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  Gradients g(p);
  g[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adamw_step(p, s, g), NumericError);
  EXPECT_EQ(s.step, 0u);
  for (double m : s.m) ASSERT_EQ(m, 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(p[i], before[i]);
}
