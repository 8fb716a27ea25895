#include "iapo/grad.hpp"

#include <cmath>
#include <limits>

#include "iapo/error.hpp"
#include "kernels.hpp"

namespace iapo {

namespace {

using Index = Eigen::Index;

// dx for y = LN(x) * gain + bias, accumulating gain/bias gradients.
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Eigen::VectorXd& rstd,
                        const Eigen::Map<const RowVec>& gain, Eigen::Map<RowVec> dgain,
                        Eigen::Map<RowVec> dbias) {
  dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * gain.array();
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() * inv_d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(xhat.row(i)) * inv_d;
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
  }
  return dx;
}

}  // namespace

ForwardTape forward_tape(const Params& params, std::span<const TokenId> tokens) {
  const TokenSeq seq(tokens.begin(), tokens.end());
  return forward_tape(params, std::span<const TokenSeq>(&seq, 1));
}

ForwardTape forward_tape(const Params& params, std::span<const TokenSeq> sequences) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const auto D = static_cast<Index>(cfg.d_model);
  const auto F = static_cast<Index>(cfg.d_ff);
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (sequences.empty()) throw DomainError("forward called with no sequences");

  ForwardTape tape;
  tape.offsets.push_back(0);
  for (const TokenSeq& seq : sequences) {
    const auto n = static_cast<Index>(seq.size());
    if (n == 0) throw DomainError("forward called with no tokens");
    if (n > cfg.max_seq_len) {
      throw LengthError("sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
    }
    tape.tokens.insert(tape.tokens.end(), seq.begin(), seq.end());
    tape.offsets.push_back(tape.offsets.back() + n);
  }
  const Index R = tape.offsets.back();
  const std::size_t S = sequences.size();

  Mat x(R, D);
  const auto tok_emb = params.mat(L.tok_embedding, cfg.vocab_size, D);
  const auto pos_emb = params.mat(L.pos_embedding, cfg.max_seq_len, D);
  for (std::size_t s = 0; s < S; ++s) {
    for (Index i = tape.offsets[s]; i < tape.offsets[s + 1]; ++i) {
      const TokenId t = tape.tokens[static_cast<std::size_t>(i)];
      if (t < 0 || t >= cfg.vocab_size) throw VocabularyError("token id out of range");
      x.row(i) = tok_emb.row(t) + pos_emb.row(i - tape.offsets[s]);
    }
  }

  tape.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerSlots& ls = L.layers[static_cast<std::size_t>(l)];
    auto& T = tape.layers[static_cast<std::size_t>(l)];
    T.x_in = x;
    kernels::layer_norm(x, params.row(ls.ln1_gain, D), params.row(ls.ln1_bias, D), T.ln1_out,
                        &T.ln1_hat, &T.ln1_rstd);
    T.qkv.noalias() = T.ln1_out * params.mat(ls.qkv_weight, D, 3 * D);
    T.qkv.rowwise() += params.row(ls.qkv_bias, 3 * D);

    T.attn.resize(R, D);
    T.probs.resize(S * static_cast<std::size_t>(H));
    for (std::size_t s = 0; s < S; ++s) {
      const Index o = tape.offsets[s];
      const Index n = tape.offsets[s + 1] - o;
      for (int h = 0; h < H; ++h) {
        const auto Q = T.qkv.block(o, h * dh, n, dh);
        const auto K = T.qkv.block(o, D + h * dh, n, dh);
        const auto V = T.qkv.block(o, 2 * D + h * dh, n, dh);
        Mat& P = T.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        P.noalias() = scale * (Q * K.transpose());
        for (Index i = 0; i < n; ++i) {
          const double mx = P.row(i).head(i + 1).maxCoeff();
          double z = 0.0;
          for (Index j = 0; j <= i; ++j) {
            P(i, j) = std::exp(P(i, j) - mx);
            z += P(i, j);
          }
          P.row(i).head(i + 1) /= z;
          P.row(i).tail(n - i - 1).setZero();
        }
        T.attn.block(o, h * dh, n, dh).noalias() = P * V;
      }
    }
    x.noalias() += T.attn * params.mat(ls.attn_out_weight, D, D);
    x.rowwise() += params.row(ls.attn_out_bias, D);
    T.x_mid = x;

    kernels::layer_norm(x, params.row(ls.ln2_gain, D), params.row(ls.ln2_bias, D), T.ln2_out,
                        &T.ln2_hat, &T.ln2_rstd);
    T.ff_pre.noalias() = T.ln2_out * params.mat(ls.ff1_weight, D, F);
    T.ff_pre.rowwise() += params.row(ls.ff1_bias, F);
    T.ff_act = kernels::gelu(T.ff_pre);
    x.noalias() += T.ff_act * params.mat(ls.ff2_weight, F, D);
    x.rowwise() += params.row(ls.ff2_bias, D);
  }
  tape.x_final = x;
  kernels::layer_norm(x, params.row(L.lnf_gain, D), params.row(L.lnf_bias, D), tape.lnf_out,
                      &tape.lnf_hat, &tape.lnf_rstd);
  tape.logits.noalias() = tape.lnf_out * params.mat(L.head_weight, D, cfg.vocab_size);
  tape.logits.rowwise() += params.row(L.head_bias, cfg.vocab_size);
  if (!tape.logits.allFinite()) throw NumericError("non-finite logits in forward pass");
  return tape;
}

void backward(const Params& params, const ForwardTape& tape, const Mat& dlogits, Gradients& grads) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  const auto R = static_cast<Index>(tape.tokens.size());
  const auto D = static_cast<Index>(cfg.d_model);
  const auto F = static_cast<Index>(cfg.d_ff);
  const auto V = static_cast<Index>(cfg.vocab_size);
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t S = tape.offsets.size() - 1;
  if (dlogits.rows() != R || dlogits.cols() != V) throw ShapeError("dlogits shape mismatch");

  grads.mat(L.head_weight, D, V).noalias() += tape.lnf_out.transpose() * dlogits;
  grads.row(L.head_bias, V) += dlogits.colwise().sum();
  Mat dx = layer_norm_backward(dlogits * params.mat(L.head_weight, D, V).transpose(), tape.lnf_hat,
                               tape.lnf_rstd, params.row(L.lnf_gain, D), grads.row(L.lnf_gain, D),
                               grads.row(L.lnf_bias, D));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerSlots& ls = L.layers[static_cast<std::size_t>(l)];
    const auto& T = tape.layers[static_cast<std::size_t>(l)];

    // Feed-forward sublayer.
    grads.mat(ls.ff2_weight, F, D).noalias() += T.ff_act.transpose() * dx;
    grads.row(ls.ff2_bias, D) += dx.colwise().sum();
    Mat dff = dx * params.mat(ls.ff2_weight, F, D).transpose();
    dff.array() *= kernels::gelu_grad(T.ff_pre).array();
    grads.mat(ls.ff1_weight, D, F).noalias() += T.ln2_out.transpose() * dff;
    grads.row(ls.ff1_bias, F) += dff.colwise().sum();
    dx += layer_norm_backward(dff * params.mat(ls.ff1_weight, D, F).transpose(), T.ln2_hat,
                              T.ln2_rstd, params.row(ls.ln2_gain, D), grads.row(ls.ln2_gain, D),
                              grads.row(ls.ln2_bias, D));

    // Attention sublayer.
    grads.mat(ls.attn_out_weight, D, D).noalias() += T.attn.transpose() * dx;
    grads.row(ls.attn_out_bias, D) += dx.colwise().sum();
    const Mat dattn = dx * params.mat(ls.attn_out_weight, D, D).transpose();
    Mat dqkv(R, 3 * D);
    for (std::size_t s = 0; s < S; ++s) {
      const Index o = tape.offsets[s];
      const Index n = tape.offsets[s + 1] - o;
      for (int h = 0; h < H; ++h) {
        const auto Q = T.qkv.block(o, h * dh, n, dh);
        const auto K = T.qkv.block(o, D + h * dh, n, dh);
        const auto Vh = T.qkv.block(o, 2 * D + h * dh, n, dh);
        const Mat& P = T.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        const auto dO = dattn.block(o, h * dh, n, dh);
        dqkv.block(o, 2 * D + h * dh, n, dh).noalias() = P.transpose() * dO;
        Mat dP = dO * Vh.transpose();
        // Softmax backward; masked entries have P = 0 and drop out.
        for (Index i = 0; i < n; ++i) {
          const double row_dot = P.row(i).dot(dP.row(i));
          dP.row(i) = P.row(i).array() * (dP.row(i).array() - row_dot);
        }
        dP *= scale;
        dqkv.block(o, h * dh, n, dh).noalias() = dP * K;
        dqkv.block(o, D + h * dh, n, dh).noalias() = dP.transpose() * Q;
      }
    }
    grads.mat(ls.qkv_weight, D, 3 * D).noalias() += T.ln1_out.transpose() * dqkv;
    grads.row(ls.qkv_bias, 3 * D) += dqkv.colwise().sum();
    dx += layer_norm_backward(dqkv * params.mat(ls.qkv_weight, D, 3 * D).transpose(), T.ln1_hat,
                              T.ln1_rstd, params.row(ls.ln1_gain, D), grads.row(ls.ln1_gain, D),
                              grads.row(ls.ln1_bias, D));
  }

  auto dtok = grads.mat(L.tok_embedding, V, D);
  auto dpos = grads.mat(L.pos_embedding, cfg.max_seq_len, D);
  for (std::size_t s = 0; s < S; ++s) {
    for (Index i = tape.offsets[s]; i < tape.offsets[s + 1]; ++i) {
      dtok.row(tape.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
      dpos.row(i - tape.offsets[s]) += dx.row(i);
    }
  }
}

namespace {

// Sequences are processed in stacked groups of at most this many rows.
constexpr std::size_t kMaxStackedRows = 4096;

template <typename Fn>
void for_each_stack(std::span<const TokenSeq> sequences, Fn&& fn) {
  std::size_t begin = 0, rows = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (rows > 0 && rows + sequences[i].size() > kMaxStackedRows) {
      fn(begin, i);
      begin = i;
      rows = 0;
    }
    rows += sequences[i].size();
  }
  if (begin < sequences.size()) fn(begin, sequences.size());
}

}  // namespace

LossAndGradients backward_loss(const Params& params, std::span<const TokenSeq> sequences,
                               const SequenceLoss& loss) {
  LossAndGradients out{0.0, Gradients(params)};
  for_each_stack(sequences, [&](std::size_t begin, std::size_t end) {
    const ForwardTape tape = forward_tape(params, sequences.subspan(begin, end - begin));
    Mat dlogits(tape.logits.rows(), tape.logits.cols());
    for (std::size_t i = begin; i < end; ++i) {
      const Index o = tape.offsets[i - begin];
      const Index n = tape.offsets[i - begin + 1] - o;
      const Mat logits = tape.logits.middleRows(o, n);
      Mat d = Mat::Zero(n, logits.cols());
      out.loss += loss(i, logits, d);
      dlogits.middleRows(o, n) = d;
    }
    backward(params, tape, dlogits, out.grads);
  });
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  if (!out.grads.all_finite()) throw NumericError("non-finite gradient");
  return out;
}

double evaluate_loss(const Params& params, std::span<const TokenSeq> sequences,
                     const SequenceLoss& loss) {
  const std::vector<Mat> logits = forward_logits_many(params, sequences);
  double total = 0.0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    Mat scratch = Mat::Zero(logits[i].rows(), logits[i].cols());
    total += loss(i, logits[i], scratch);
  }
  return total;
}

double global_norm(const Gradients& grads) { return grads.l2_norm(); }

double clip_grad_norm(Gradients& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (double& g : grads.values()) g *= s;
  }
  return norm;
}

AdamWState AdamWState::for_params(const Params& params, const AdamWHyper& hyper) {
  AdamWState s;
  s.hyper = hyper;
  s.m.assign(params.size(), 0.0);
  s.v.assign(params.size(), 0.0);
  return s;
}

void adamw_step(Params& params, AdamWState& state, const Gradients& grads) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw ShapeError("optimizer state does not match parameters");
  }
  if (!grads.all_finite()) throw NumericError("non-finite gradient rejected by AdamW");
  const auto& h = state.hyper;
  const double lr = state.effective_lr();
  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  auto w = params.values();
  auto g = grads.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    w[i] -= lr * (mhat / (std::sqrt(vhat) + h.eps) + h.weight_decay * w[i]);
  }
  state.step = t;
}

}  // namespace iapo
