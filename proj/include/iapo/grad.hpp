#pragma once

#include <functional>
#include <span>
#include <vector>

#include "iapo/model.hpp"

namespace iapo {

// Activations of full causal passes over one or more sequences, kept for the
// backward pass. Rows of all sequences are stacked; sequence s occupies rows
// [offsets[s], offsets[s+1]).
struct ForwardTape {
  struct Layer {
    Mat x_in;           // residual stream entering the block
    Mat ln1_hat;        // normalized (pre-affine) LN1 input
    Eigen::VectorXd ln1_rstd;
    Mat ln1_out;
    Mat qkv;
    std::vector<Mat> probs;  // [sequence * n_heads + head], causal attention weights
    Mat attn;                // concatenated head outputs
    Mat x_mid;               // residual after attention
    Mat ln2_hat;
    Eigen::VectorXd ln2_rstd;
    Mat ln2_out;
    Mat ff_pre;   // before GELU
    Mat ff_act;   // after GELU
  };

  TokenSeq tokens;                    // all sequences, concatenated
  std::vector<Eigen::Index> offsets;  // size = sequence count + 1
  std::vector<Layer> layers;
  Mat x_final;
  Mat lnf_hat;
  Eigen::VectorXd lnf_rstd;
  Mat lnf_out;
  Mat logits;
};

ForwardTape forward_tape(const Params& params, std::span<const TokenId> tokens);
ForwardTape forward_tape(const Params& params, std::span<const TokenSeq> sequences);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
void backward(const Params& params, const ForwardTape& tape, const Mat& dlogits, Gradients& grads);

// Per-sequence loss: reads the logits of sequence `index`, fills `dlogits`
// (same shape, pre-zeroed) and returns that sequence's loss contribution.
using SequenceLoss = std::function<double(std::size_t index, const Mat& logits, Mat& dlogits)>;

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

// Total loss over `sequences` and its exact gradient. Throws NumericError if
// the loss or any gradient entry is non-finite.
LossAndGradients backward_loss(const Params& params, std::span<const TokenSeq> sequences,
                               const SequenceLoss& loss);

// Loss only, through the same per-sequence callback (no tape).
double evaluate_loss(const Params& params, std::span<const TokenSeq> sequences,
                     const SequenceLoss& loss);

double global_norm(const Gradients& grads);

// Rescales so the global L2 norm is at most max_norm. Returns the norm
// before clipping.
double clip_grad_norm(Gradients& grads, double max_norm);

struct AdamWHyper {
  double lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  AdamWHyper hyper;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double lr_scale = 1.0;  // multiplicative decay applied on the schedule

  static AdamWState for_params(const Params& params, const AdamWHyper& hyper);
  double effective_lr() const { return hyper.lr * lr_scale; }
};

// Bias-corrected AdamW with decoupled weight decay. Non-finite gradients are
// rejected with NumericError before anything is modified.
void adamw_step(Params& params, AdamWState& state, const Gradients& grads);

}  // namespace iapo
