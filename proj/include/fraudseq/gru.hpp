#pragma once

#include <span>
#include <vector>

#include "fraudseq/model.hpp"
#include "fraudseq/sequence_store.hpp"
#include "fraudseq/transforms.hpp"

namespace fraudseq {

namespace detail {

template <class Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  return a.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
}

template <class Derived>
auto relu(const Eigen::MatrixBase<Derived>& a) {
  return a.cwiseMax(typename Derived::Scalar(0));
}

template <class Scalar>
Scalar logistic(Scalar v) {
  return Scalar(1) / (Scalar(1) + std::exp(-v));
}

}  // namespace detail

/// Intermediates of one GRU layer at one step.
template <class Scalar>
struct GruStepTape {
  VectorX<Scalar> input, s_prev, r, z, us, cand, s_new;
};

/// Everything one event's forward pass needs to be differentiated.
template <class Scalar>
struct StepTape {
  std::vector<std::int32_t> cat_indices;
  VectorX<Scalar> concat, pre_input, x;  // x is the block-f output x'
  std::vector<GruStepTape<Scalar>> layers;
  std::vector<VectorX<Scalar>> cls_in;   // input of each classifier layer
  std::vector<VectorX<Scalar>> cls_pre;  // pre-activation of each hidden layer
  Scalar y_hat{};
};

template <class Scalar>
using ForwardTape = std::vector<StepTape<Scalar>>;

/// Learnable part of block f: dense slots and one embedding row per
/// categorical are concatenated, then an affine map and ReLU.
template <class Scalar>
VectorX<Scalar> feature_block(const FeatureVector& fv, const ModelParams<Scalar>& p,
                              StepTape<Scalar>* tape = nullptr) {
  const auto& cfg = p.config;
  if (fv.dense.size() != cfg.dense_dim || fv.cat_indices.size() != p.embeddings.size()) {
    fail(ErrorCode::kShapeMismatch, "feature vector does not match the model config");
  }
  VectorX<Scalar> concat(static_cast<Eigen::Index>(cfg.concat_dim()));
  Eigen::Index at = 0;
  for (double d : fv.dense) concat(at++) = static_cast<Scalar>(d);
  for (std::size_t i = 0; i < p.embeddings.size(); ++i) {
    const auto idx = fv.cat_indices[i];
    const auto& table = p.embeddings[i];
    if (idx < 0 || idx >= table.rows()) {
      fail(ErrorCode::kIndexOutOfRange, "categorical " + std::to_string(i) + " index " + std::to_string(idx));
    }
    concat.segment(at, table.cols()) = table.row(idx).transpose();
    at += table.cols();
  }
  VectorX<Scalar> pre = p.input.w * concat + p.input.b;
  VectorX<Scalar> x = detail::relu(pre);
  if (tape) {
    tape->cat_indices = fv.cat_indices;
    tape->concat = std::move(concat);
    tape->pre_input = std::move(pre);
    tape->x = x;
  }
  return x;
}

/// One GRU update:
///   r = sig(W_r x + U_r s + b_r), z = sig(W_z x + U_z s + b_z)
///   s' = tanh(W_h x + r * (U_h s) + b_h), s_new = z * s + (1 - z) * s'
template <class Scalar>
VectorX<Scalar> gru_step(const VectorX<Scalar>& x, const VectorX<Scalar>& s_prev, const GruLayer<Scalar>& g,
                         GruStepTape<Scalar>* tape = nullptr) {
  if (x.size() != g.w_r.cols() || s_prev.size() != g.u_r.cols()) {
    fail(ErrorCode::kShapeMismatch, "gru_step input or state width");
  }
  VectorX<Scalar> r = detail::sigmoid(g.w_r * x + g.u_r * s_prev + g.b_r);
  VectorX<Scalar> z = detail::sigmoid(g.w_z * x + g.u_z * s_prev + g.b_z);
  VectorX<Scalar> us = g.u_h * s_prev;
  VectorX<Scalar> cand = (g.w_h * x + r.cwiseProduct(us) + g.b_h).array().tanh().matrix();
  VectorX<Scalar> s_new = z.cwiseProduct(s_prev) + (VectorX<Scalar>::Ones(z.size()) - z).cwiseProduct(cand);
  if (tape) {
    tape->input = x;
    tape->s_prev = s_prev;
    tape->r = std::move(r);
    tape->z = std::move(z);
    tape->us = std::move(us);
    tape->cand = std::move(cand);
    tape->s_new = s_new;
  }
  return s_new;
}

/// Block h: [s_top; x'] through ReLU dense layers, then a sigmoid logit.
template <class Scalar>
Scalar classifier_block(const VectorX<Scalar>& s_top, const VectorX<Scalar>& x, const ModelParams<Scalar>& p,
                        StepTape<Scalar>* tape = nullptr) {
  if (s_top.size() + x.size() != (p.hidden.empty() ? p.output.w.cols() : p.hidden.front().w.cols())) {
    fail(ErrorCode::kShapeMismatch, "classifier input width");
  }
  VectorX<Scalar> h(s_top.size() + x.size());
  h << s_top, x;
  for (const auto& layer : p.hidden) {
    VectorX<Scalar> pre = layer.w * h + layer.b;
    if (tape) {
      tape->cls_in.push_back(h);
      tape->cls_pre.push_back(pre);
    }
    h = detail::relu(pre);
  }
  const Scalar logit = (p.output.w * h)(0) + p.output.b(0);
  const Scalar y = detail::logistic(logit);
  if (tape) {
    tape->cls_in.push_back(std::move(h));
    tape->y_hat = y;
  }
  return y;
}

/// Scores one event and advances the state in place. Shared by sequence
/// scoring, batch inference and the streaming engine.
template <class Scalar>
Scalar model_step(const ModelParams<Scalar>& p, const FeatureVector& fv, EntityState<Scalar>& state,
                  StepTape<Scalar>* tape = nullptr) {
  if (state.layers.size() != p.gru.size()) fail(ErrorCode::kShapeMismatch, "state layer count");
  if (tape) tape->layers.resize(p.gru.size());
  VectorX<Scalar> x = feature_block(fv, p, tape);
  const VectorX<Scalar>* in = &x;
  for (std::size_t l = 0; l < p.gru.size(); ++l) {
    state.layers[l] = gru_step(*in, state.layers[l], p.gru[l], tape ? &tape->layers[l] : nullptr);
    in = &state.layers[l];
  }
  return classifier_block(state.layers.back(), x, p, tape);
}

template <class Scalar>
struct ForwardResult {
  std::vector<Scalar> scores;
  EntityState<Scalar> state;
  ForwardTape<Scalar> tape;
};

template <class Scalar>
ForwardResult<Scalar> forward_sequence(const ModelParams<Scalar>& p, std::span<const SequenceEvent> events,
                                       EntityState<Scalar> s0, bool record_tape = false) {
  ForwardResult<Scalar> out;
  out.state = std::move(s0);
  out.scores.reserve(events.size());
  if (record_tape) out.tape.resize(events.size());
  for (std::size_t t = 0; t < events.size(); ++t) {
    out.scores.push_back(model_step(p, events[t].features, out.state, record_tape ? &out.tape[t] : nullptr));
    out.state.last_event_ts = events[t].ts;
  }
  return out;
}

/// Accumulates into grads the gradient of
///   loss_scale * sum over scorable t of BCE(y_hat_t, label_t).
/// Non-scorable steps add no loss but carry gradient through the recurrence.
/// The output delta is (y_hat - y), the exact derivative wherever the
/// [1e-7, 1 - 1e-7] clamp of masked_bce is inactive.
template <class Scalar>
void backward_sequence(const ModelParams<Scalar>& p, const ForwardTape<Scalar>& tape,
                       std::span<const double> labels, std::span<const std::uint8_t> scorable,
                       Scalar loss_scale, ModelParams<Scalar>& grads) {
  const std::size_t steps = tape.size();
  if (labels.size() != steps || scorable.size() != steps) fail(ErrorCode::kShapeMismatch, "backward mask length");
  const std::size_t n_layers = p.gru.size();
  std::vector<VectorX<Scalar>> ds(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) ds[l] = VectorX<Scalar>::Zero(p.gru[l].width());
  const Eigen::Index top = p.gru.back().width();

  for (std::size_t t = steps; t-- > 0;) {
    const StepTape<Scalar>& st = tape[t];
    VectorX<Scalar> dx = VectorX<Scalar>::Zero(st.x.size());

    if (scorable[t]) {
      // classifier
      VectorX<Scalar> dh(1);
      dh(0) = loss_scale * (st.y_hat - static_cast<Scalar>(labels[t]));
      const VectorX<Scalar>& last_in = st.cls_in.back();
      grads.output.w.noalias() += dh * last_in.transpose();
      grads.output.b += dh;
      VectorX<Scalar> dcur = p.output.w.transpose() * dh;
      for (std::size_t j = p.hidden.size(); j-- > 0;) {
        VectorX<Scalar> dpre = dcur.cwiseProduct((st.cls_pre[j].array() > Scalar(0)).template cast<Scalar>().matrix());
        grads.hidden[j].w.noalias() += dpre * st.cls_in[j].transpose();
        grads.hidden[j].b += dpre;
        dcur = p.hidden[j].w.transpose() * dpre;
      }
      ds[n_layers - 1] += dcur.head(top);
      dx += dcur.tail(st.x.size());
    }

    for (std::size_t l = n_layers; l-- > 0;) {
      const GruLayer<Scalar>& g = p.gru[l];
      GruLayer<Scalar>& gg = grads.gru[l];
      const GruStepTape<Scalar>& lt = st.layers[l];
      const auto ones = VectorX<Scalar>::Ones(lt.z.size());

      const VectorX<Scalar>& dnew = ds[l];
      VectorX<Scalar> ds_prev = dnew.cwiseProduct(lt.z);
      VectorX<Scalar> dz = dnew.cwiseProduct(lt.s_prev - lt.cand);
      VectorX<Scalar> dcand = dnew.cwiseProduct(ones - lt.z);

      VectorX<Scalar> da_h = dcand.cwiseProduct(ones - lt.cand.cwiseAbs2());
      VectorX<Scalar> dr = da_h.cwiseProduct(lt.us);
      VectorX<Scalar> dus = da_h.cwiseProduct(lt.r);
      VectorX<Scalar> da_r = dr.cwiseProduct(lt.r.cwiseProduct(ones - lt.r));
      VectorX<Scalar> da_z = dz.cwiseProduct(lt.z.cwiseProduct(ones - lt.z));

      gg.w_h.noalias() += da_h * lt.input.transpose();
      gg.b_h += da_h;
      gg.u_h.noalias() += dus * lt.s_prev.transpose();
      gg.w_r.noalias() += da_r * lt.input.transpose();
      gg.u_r.noalias() += da_r * lt.s_prev.transpose();
      gg.b_r += da_r;
      gg.w_z.noalias() += da_z * lt.input.transpose();
      gg.u_z.noalias() += da_z * lt.s_prev.transpose();
      gg.b_z += da_z;

      ds_prev.noalias() += g.u_h.transpose() * dus;
      ds_prev.noalias() += g.u_r.transpose() * da_r;
      ds_prev.noalias() += g.u_z.transpose() * da_z;

      VectorX<Scalar> din = g.w_r.transpose() * da_r;
      din.noalias() += g.w_z.transpose() * da_z;
      din.noalias() += g.w_h.transpose() * da_h;

      ds[l] = std::move(ds_prev);
      if (l > 0) {
        ds[l - 1] += din;
      } else {
        dx += din;
      }
    }

    // block f
    VectorX<Scalar> dpre = dx.cwiseProduct((st.pre_input.array() > Scalar(0)).template cast<Scalar>().matrix());
    grads.input.w.noalias() += dpre * st.concat.transpose();
    grads.input.b += dpre;
    VectorX<Scalar> dconcat = p.input.w.transpose() * dpre;
    Eigen::Index at = static_cast<Eigen::Index>(p.config.dense_dim);
    for (std::size_t i = 0; i < p.embeddings.size(); ++i) {
      const auto cols = p.embeddings[i].cols();
      grads.embeddings[i].row(st.cat_indices[i]) += dconcat.segment(at, cols).transpose();
      at += cols;
    }
  }
}

/// Gradient of the mean BCE over the scorable events of one sequence.
template <class Scalar>
ModelParams<Scalar> backward_sequence(const ModelParams<Scalar>& p, const ForwardTape<Scalar>& tape,
                                      std::span<const SequenceEvent> events) {
  std::vector<double> labels;
  std::vector<std::uint8_t> mask;
  std::size_t n = 0;
  for (const auto& e : events) {
    labels.push_back(e.label == Label::kFraud ? 1.0 : 0.0);
    const bool use = e.scorable && e.label != Label::kUnknown;
    mask.push_back(use ? 1 : 0);
    n += use ? 1 : 0;
  }
  if (n == 0) fail(ErrorCode::kEmptyScorableSet, "no scorable event in sequence");
  auto grads = ModelParams<Scalar>::zeros(p.config);
  backward_sequence<Scalar>(p, tape, labels, mask, Scalar(1) / static_cast<Scalar>(n), grads);
  return grads;
}

}  // namespace fraudseq
