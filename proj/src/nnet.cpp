#include "ltx/nnet.hpp"

#include "ltx/error.hpp"
#include "ltx/logspace.hpp"

#include <cmath>
#include <random>

namespace ltx {

namespace {

Eigen::MatrixXd tanh_of(const Eigen::MatrixXd& a) { return a.array().tanh().matrix(); }

// Column-wise log-softmax; also returns the probabilities.
// std::exp underflows to exact zeros; Eigen's vectorized exp leaves subnormals.
Eigen::MatrixXd exp_of(const Eigen::MatrixXd& m) {
  return m.unaryExpr([](double v) { return std::exp(v); });
}

Eigen::MatrixXd column_log_softmax(const Eigen::MatrixXd& logits, Eigen::MatrixXd* probs) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) out.col(c) = log_softmax(logits.col(c));
  if (probs) *probs = exp_of(out);
  return out;
}

// Backward of a column-wise log-softmax given its probabilities.
Eigen::MatrixXd log_softmax_backward(const Eigen::MatrixXd& probs, const Eigen::MatrixXd& g) {
  const Eigen::RowVectorXd totals = g.colwise().sum();
  return g - (probs.array().rowwise() * totals.array()).matrix();
}

}  // namespace

// --- configuration ---------------------------------------------------------

std::vector<std::string> DecoderConfig::non_factorizable_flags() const {
  std::vector<std::string> out;
  if (use_fast_rnn) out.push_back("use_fast_rnn");
  if (label_feedback) out.push_back("label_feedback");
  if (encoder_to_slow) out.push_back("encoder_to_slow");
  return out;
}

void DecoderConfig::validate() const {
  if (slow_dim < 1 || fast_dim < 1 || readout_dim < 1)
    throw ConfigError("decoder dimensions must be positive");
  if (label_feedback && !use_fast_rnn)
    throw ConfigError("model.label_feedback requires model.use_fast_rnn");
}

void ModelConfig::validate() const {
  if (encoder.input_dim < 1) throw ConfigError("model.input_dim must be positive");
  if (encoder.layers < 1) throw ConfigError("model.encoder_layers must be >= 1");
  if (encoder.hidden_dim < 1) throw ConfigError("model.hidden_dim must be positive");
  if (encoder.pool_factor < 1) throw ConfigError("model.pool_factor must be >= 1");
  if (encoder.bidirectional && encoder.hidden_dim % 2 != 0)
    throw ConfigError("model.hidden_dim must be even for a bidirectional encoder");
  decoder.validate();
}

ModelConfig ModelConfig::from_config(const ConfigMap& cfg) {
  ModelConfig m;
  m.topology = parse_topology(cfg.get_string("model.topology", "rna"));
  if (auto names = cfg.get_list("model.labels"); !names.empty())
    m.vocab = Vocab(std::move(names));
  else
    m.vocab = Vocab(static_cast<int>(cfg.get_int("model.num_labels", 1)));
  m.encoder.input_dim = static_cast<int>(cfg.get_int("model.input_dim", 0));
  m.encoder.layers = static_cast<int>(cfg.get_int("model.encoder_layers", 1));
  m.encoder.hidden_dim = static_cast<int>(cfg.get_int("model.hidden_dim", 32));
  m.encoder.pool_factor = static_cast<int>(cfg.get_int("model.pool_factor", 1));
  m.encoder.bidirectional = cfg.get_bool("model.bidirectional", false);
  m.decoder.slow_dim = static_cast<int>(cfg.get_int("model.slow_dim", 32));
  m.decoder.fast_dim = static_cast<int>(cfg.get_int("model.fast_dim", 32));
  m.decoder.readout_dim = static_cast<int>(cfg.get_int("model.readout_dim", 32));
  m.decoder.label_feedback = cfg.get_bool("model.label_feedback", false);
  m.decoder.encoder_to_slow = cfg.get_bool("model.encoder_to_slow", false);
  m.decoder.use_fast_rnn = cfg.get_bool("model.use_fast_rnn", false);
  m.decoder.separate_blank_sigmoid = cfg.get_bool("model.separate_blank_sigmoid", false);
  m.seed = static_cast<std::uint64_t>(cfg.get_int("model.seed", 1));
  m.validate();
  return m;
}

ConfigMap ModelConfig::to_config() const {
  ConfigMap c;
  c.set("model.topology", std::string(topology_name(topology)));
  std::string names;
  for (const auto& n : vocab.label_names()) names += (names.empty() ? "" : ",") + n;
  c.set("model.labels", names);
  c.set("model.input_dim", std::to_string(encoder.input_dim));
  c.set("model.encoder_layers", std::to_string(encoder.layers));
  c.set("model.hidden_dim", std::to_string(encoder.hidden_dim));
  c.set("model.pool_factor", std::to_string(encoder.pool_factor));
  c.set("model.bidirectional", encoder.bidirectional ? "true" : "false");
  c.set("model.slow_dim", std::to_string(decoder.slow_dim));
  c.set("model.fast_dim", std::to_string(decoder.fast_dim));
  c.set("model.readout_dim", std::to_string(decoder.readout_dim));
  c.set("model.label_feedback", decoder.label_feedback ? "true" : "false");
  c.set("model.encoder_to_slow", decoder.encoder_to_slow ? "true" : "false");
  c.set("model.use_fast_rnn", decoder.use_fast_rnn ? "true" : "false");
  c.set("model.separate_blank_sigmoid", decoder.separate_blank_sigmoid ? "true" : "false");
  c.set("model.seed", std::to_string(seed));
  return c;
}

std::uint64_t ModelConfig::digest() const { return fnv1a64(to_config().serialize()); }

// --- construction ----------------------------------------------------------

TransducerModel::TransducerModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int d_in = config_.encoder.input_dim;
  const int hid = config_.encoder.hidden_dim;
  const int v = vocab_size();
  const int k = config_.vocab.num_labels();
  const auto& dec = config_.decoder;

  for (int l = 0; l < config_.encoder.layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    const int dim = config_.encoder.bidirectional ? hid / 2 : hid;
    auto make = [&](const std::string& prefix) {
      Recurrent cell;
      cell.inputs.emplace_back(prefix + "W_in", dim, l == 0 ? d_in : hid);
      cell.rec = Param(prefix + "W_rec", dim, dim);
      cell.bias = Param(prefix + "b", dim, 1);
      return cell;
    };
    encoder_.push_back(make(p));
    if (config_.encoder.bidirectional) encoder_rev_.push_back(make(p + "rev."));
  }

  slow_.inputs.emplace_back("slow.W_label", dec.slow_dim, v);
  if (dec.encoder_to_slow) slow_.inputs.emplace_back("slow.W_enc", dec.slow_dim, hid);
  slow_.rec = Param("slow.W_rec", dec.slow_dim, dec.slow_dim);
  slow_.bias = Param("slow.b", dec.slow_dim, 1);

  if (dec.use_fast_rnn) {
    fast_.inputs.emplace_back("fast.W_slow", dec.fast_dim, dec.slow_dim);
    if (dec.label_feedback) fast_.inputs.emplace_back("fast.W_label", dec.fast_dim, v);
    fast_.inputs.emplace_back("fast.W_enc", dec.fast_dim, hid);
    fast_.rec = Param("fast.W_rec", dec.fast_dim, dec.fast_dim);
    fast_.bias = Param("fast.b", dec.fast_dim, 1);
  }
  const int fast_out = dec.use_fast_rnn ? dec.fast_dim : hid;

  readout_fast_ = Param("readout.W_fast", dec.readout_dim, fast_out);
  readout_slow_ = Param("readout.W_slow", dec.readout_dim, dec.slow_dim);
  readout_bias_ = Param("readout.b", dec.readout_dim, 1);
  if (dec.separate_blank_sigmoid) {
    blank_w_ = Param("readout.blank.W", 1, dec.readout_dim);
    blank_b_ = Param("readout.blank.b", 1, 1);
    label_w_ = Param("readout.label.W", k, dec.readout_dim);
    label_b_ = Param("readout.label.b", k, 1);
  } else {
    joint_w_ = Param("readout.joint.W", v, dec.readout_dim);
    joint_b_ = Param("readout.joint.b", v, 1);
  }
  aux_w_ = Param("aux_ctc.W", v, hid);
  aux_b_ = Param("aux_ctc.b", v, 1);

  // Uniform(-r, r) with r = 1/sqrt(fan-in of the owning layer).
  std::mt19937_64 rng(config_.seed);
  auto fill = [&](Param& p, int fan_in) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index j = 0; j < p.value.cols(); ++j)
      for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = r * dist(rng);
  };
  auto fill_cell = [&](Recurrent& cell) {
    int fan_in = static_cast<int>(cell.rec.value.cols());
    for (const auto& in : cell.inputs) fan_in += static_cast<int>(in.value.cols());
    for (auto& in : cell.inputs) fill(in, fan_in);
    fill(cell.rec, fan_in);
    fill(cell.bias, fan_in);
  };
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    fill_cell(encoder_[l]);
    if (!encoder_rev_.empty()) fill_cell(encoder_rev_[l]);
  }
  fill_cell(slow_);
  if (dec.use_fast_rnn) fill_cell(fast_);
  const int readout_fan_in = fast_out + dec.slow_dim;
  fill(readout_fast_, readout_fan_in);
  fill(readout_slow_, readout_fan_in);
  fill(readout_bias_, readout_fan_in);
  for (Param* p : {&blank_w_, &blank_b_, &label_w_, &label_b_, &joint_w_, &joint_b_})
    if (p->value.size() > 0) fill(*p, dec.readout_dim);
  fill(aux_w_, hid);
  fill(aux_b_, hid);
}

std::vector<Param*> TransducerModel::params() {
  std::vector<Param*> out;
  auto add_cell = [&](Recurrent& cell) {
    for (auto& in : cell.inputs) out.push_back(&in);
    out.push_back(&cell.rec);
    out.push_back(&cell.bias);
  };
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    add_cell(encoder_[l]);
    if (!encoder_rev_.empty()) add_cell(encoder_rev_[l]);
  }
  add_cell(slow_);
  if (config_.decoder.use_fast_rnn) add_cell(fast_);
  for (Param* p : {&readout_fast_, &readout_slow_, &readout_bias_, &blank_w_, &blank_b_,
                   &label_w_, &label_b_, &joint_w_, &joint_b_, &aux_w_, &aux_b_})
    if (!p->name.empty()) out.push_back(p);
  return out;
}

std::vector<const Param*> TransducerModel::params() const {
  auto mut = const_cast<TransducerModel*>(this)->params();
  return {mut.begin(), mut.end()};
}

Param* TransducerModel::find(const std::string& name) {
  for (Param* p : params())
    if (p->name == name) return p;
  return nullptr;
}

const Param* TransducerModel::find(const std::string& name) const {
  return const_cast<TransducerModel*>(this)->find(name);
}

void TransducerModel::zero_grad() {
  for (Param* p : params()) p->grad.setZero();
}

std::size_t TransducerModel::num_params() const {
  std::size_t total = 0;
  for (const Param* p : params()) total += static_cast<std::size_t>(p->value.size());
  return total;
}

Eigen::VectorXd TransducerModel::one_hot(Symbol s) const {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(vocab_size());
  e(s) = 1.0;
  return e;
}

// --- recurrent cell ----------------------------------------------------------
//   s_k = tanh(sum_i W_i x_{i,k} + W_rec s_{k-1} + b),  s_{-1} = 0

Eigen::MatrixXd TransducerModel::recurrent_forward(
    const Recurrent& cell, const std::vector<Eigen::MatrixXd>& inputs) const {
  const Eigen::Index len = inputs.front().cols();
  Eigen::MatrixXd pre = cell.bias.value.replicate(1, len);
  for (std::size_t i = 0; i < inputs.size(); ++i) pre.noalias() += cell.inputs[i].value * inputs[i];
  Eigen::MatrixXd states(pre.rows(), len);
  for (Eigen::Index k = 0; k < len; ++k) {
    if (k > 0) pre.col(k).noalias() += cell.rec.value * states.col(k - 1);
    states.col(k) = pre.col(k).array().tanh();
  }
  return states;
}

std::vector<Eigen::MatrixXd> TransducerModel::recurrent_backward(
    Recurrent& cell, const std::vector<Eigen::MatrixXd>& inputs, const Eigen::MatrixXd& states,
    Eigen::MatrixXd dstates) {
  const Eigen::Index len = states.cols();
  Eigen::MatrixXd dpre(states.rows(), len);
  for (Eigen::Index k = len - 1; k >= 0; --k) {
    dpre.col(k) = dstates.col(k).array() * (1.0 - states.col(k).array().square());
    if (k > 0) dstates.col(k - 1).noalias() += cell.rec.value.transpose() * dpre.col(k);
  }
  if (len > 1)
    cell.rec.grad.noalias() += dpre.rightCols(len - 1) * states.leftCols(len - 1).transpose();
  cell.bias.grad += dpre.rowwise().sum();
  std::vector<Eigen::MatrixXd> dinputs;
  dinputs.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    cell.inputs[i].grad.noalias() += dpre * inputs[i].transpose();
    dinputs.push_back(cell.inputs[i].value.transpose() * dpre);
  }
  return dinputs;
}

// --- encoder -----------------------------------------------------------------

EncoderOutput TransducerModel::encode(const Eigen::MatrixXd& x) const {
  if (x.rows() < 1) throw ValidationError("encode: empty input sequence");
  if (x.cols() != config_.encoder.input_dim)
    throw DimensionError("encode: feature dimension " + std::to_string(x.cols()) +
                         " does not match model input_dim " +
                         std::to_string(config_.encoder.input_dim));
  EncoderOutput out;
  Eigen::MatrixXd current = x.transpose();
  const int pool = config_.encoder.pool_factor;
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    out.layer_inputs.push_back(current);
    Eigen::MatrixXd states = recurrent_forward(encoder_[l], {current});
    if (!encoder_rev_.empty()) {
      const Eigen::MatrixXd rev =
          recurrent_forward(encoder_rev_[l], {current.rowwise().reverse()}).rowwise().reverse();
      Eigen::MatrixXd both(states.rows() + rev.rows(), states.cols());
      both << states, rev;
      states = std::move(both);
    }
    out.layer_states.push_back(states);
    current = std::move(states);
    if (l == 0 && pool > 1) {
      const Eigen::Index in_frames = current.cols();
      const Eigen::Index frames = (in_frames + pool - 1) / pool;
      Eigen::MatrixXd pooled(current.rows(), frames);
      out.pool_argmax.resize(current.rows(), frames);
      for (Eigen::Index t = 0; t < frames; ++t) {
        const Eigen::Index begin = t * pool;
        const Eigen::Index width = std::min<Eigen::Index>(pool, in_frames - begin);
        for (Eigen::Index i = 0; i < current.rows(); ++i) {
          Eigen::Index arg = 0;
          pooled(i, t) = current.row(i).segment(begin, width).maxCoeff(&arg);
          out.pool_argmax(i, t) = static_cast<int>(begin + arg);
        }
      }
      current = std::move(pooled);
    }
  }
  out.h = std::move(current);
  return out;
}

Eigen::MatrixXd TransducerModel::encode_backward(const EncoderOutput& enc, const Eigen::MatrixXd& dh) {
  Eigen::MatrixXd d_out = dh;
  const bool pooled = config_.encoder.pool_factor > 1;
  for (int l = static_cast<int>(encoder_.size()) - 1; l >= 0; --l) {
    Eigen::MatrixXd dstates;
    if (l == 0 && pooled) {
      dstates.setZero(enc.layer_states[0].rows(), enc.layer_states[0].cols());
      for (Eigen::Index t = 0; t < d_out.cols(); ++t)
        for (Eigen::Index i = 0; i < d_out.rows(); ++i)
          dstates(i, enc.pool_argmax(i, t)) += d_out(i, t);
    } else {
      dstates = d_out;
    }
    const Eigen::MatrixXd& states = enc.layer_states[l];
    if (encoder_rev_.empty()) {
      d_out = recurrent_backward(encoder_[l], {enc.layer_inputs[l]}, states, std::move(dstates)).front();
      continue;
    }
    const Eigen::Index half = states.rows() / 2;
    d_out = recurrent_backward(encoder_[l], {enc.layer_inputs[l]}, states.topRows(half),
                               dstates.topRows(half))
                .front();
    d_out += recurrent_backward(encoder_rev_[l], {enc.layer_inputs[l].rowwise().reverse()},
                                states.bottomRows(half).rowwise().reverse(),
                                dstates.bottomRows(half).rowwise().reverse())
                 .front()
                 .rowwise()
                 .reverse();
  }
  return d_out.transpose();
}

// --- decoder cells -------------------------------------------------------------

Eigen::VectorXd TransducerModel::slow_step(const Eigen::VectorXd& state, Symbol y_prev,
                                           const Eigen::VectorXd& h_at_last_emit) const {
  Eigen::VectorXd pre = slow_.bias.value.col(0) + slow_.inputs[0].value.col(y_prev) +
                        slow_.rec.value * state;
  if (config_.decoder.encoder_to_slow) pre.noalias() += slow_.inputs[1].value * h_at_last_emit;
  return pre.array().tanh();
}

Eigen::VectorXd TransducerModel::fast_step(const Eigen::VectorXd& state, const Eigen::VectorXd& slow,
                                           Symbol alpha_prev, const Eigen::VectorXd& h_t) const {
  const auto& dec = config_.decoder;
  if (!dec.use_fast_rnn) return h_t;
  std::size_t i = 0;
  Eigen::VectorXd pre = fast_.bias.value.col(0) + fast_.rec.value * state;
  pre.noalias() += fast_.inputs[i++].value * slow;
  if (dec.label_feedback) pre += fast_.inputs[i++].value.col(alpha_prev);
  pre.noalias() += fast_.inputs[i].value * h_t;
  return pre.array().tanh();
}

Eigen::VectorXd TransducerModel::emit_distribution(const Eigen::VectorXd& fast,
                                                   const Eigen::VectorXd& slow) const {
  return readout_forward(fast, slow, nullptr).col(0);
}

// --- readout -----------------------------------------------------------------

Eigen::MatrixXd TransducerModel::readout_forward(const Eigen::MatrixXd& fast,
                                                 const Eigen::MatrixXd& slow,
                                                 ReadoutCache* cache) const {
  const Eigen::Index m = fast.cols();
  Eigen::MatrixXd pre = readout_bias_.value.replicate(1, m);
  pre.noalias() += readout_fast_.value * fast;
  pre.noalias() += readout_slow_.value * slow;
  Eigen::MatrixXd hidden = tanh_of(pre);

  const int v = vocab_size();
  Eigen::MatrixXd log_probs(v, m);
  Eigen::MatrixXd head_probs;
  Eigen::RowVectorXd blank_prob;
  if (config_.decoder.separate_blank_sigmoid) {
    const Eigen::RowVectorXd r = (blank_w_.value * hidden).colwise() + blank_b_.value.col(0);
    const Eigen::MatrixXd label_logits = (label_w_.value * hidden).colwise() + label_b_.value.col(0);
    const Eigen::MatrixXd label_lp = column_log_softmax(label_logits, &head_probs);
    blank_prob.resize(m);
    for (Eigen::Index c = 0; c < m; ++c) {
      blank_prob(c) = sigmoid(r(c));
      log_probs(0, c) = log_sigmoid(r(c));
      log_probs.col(c).tail(v - 1) = label_lp.col(c).array() + log_sigmoid(-r(c));
    }
  } else {
    const Eigen::MatrixXd logits = (joint_w_.value * hidden).colwise() + joint_b_.value.col(0);
    log_probs = column_log_softmax(logits, &head_probs);
  }
  if (cache) {
    cache->fast = fast;
    cache->slow = slow;
    cache->hidden = std::move(hidden);
    cache->head_probs = std::move(head_probs);
    cache->blank_prob = std::move(blank_prob);
  }
  return log_probs;
}

void TransducerModel::readout_backward(const ReadoutCache& cache, const Eigen::MatrixXd& g,
                                       Eigen::MatrixXd* dfast, Eigen::MatrixXd* dslow) {
  const Eigen::MatrixXd& z = cache.hidden;
  Eigen::MatrixXd dz;
  if (config_.decoder.separate_blank_sigmoid) {
    const Eigen::Index v = g.rows();
    const Eigen::MatrixXd g_labels = g.bottomRows(v - 1);
    const Eigen::RowVectorXd label_total = g_labels.colwise().sum();
    const Eigen::RowVectorXd dr =
        (g.row(0).array() * (1.0 - cache.blank_prob.array()) -
         cache.blank_prob.array() * label_total.array())
            .matrix();
    const Eigen::MatrixXd dl = log_softmax_backward(cache.head_probs, g_labels);
    blank_w_.grad.noalias() += dr * z.transpose();
    blank_b_.grad(0, 0) += dr.sum();
    label_w_.grad.noalias() += dl * z.transpose();
    label_b_.grad += dl.rowwise().sum();
    dz = blank_w_.value.transpose() * dr;
    dz.noalias() += label_w_.value.transpose() * dl;
  } else {
    const Eigen::MatrixXd dlogits = log_softmax_backward(cache.head_probs, g);
    joint_w_.grad.noalias() += dlogits * z.transpose();
    joint_b_.grad += dlogits.rowwise().sum();
    dz = joint_w_.value.transpose() * dlogits;
  }
  const Eigen::MatrixXd dpre = (dz.array() * (1.0 - z.array().square())).matrix();
  readout_fast_.grad.noalias() += dpre * cache.fast.transpose();
  readout_slow_.grad.noalias() += dpre * cache.slow.transpose();
  readout_bias_.grad += dpre.rowwise().sum();
  if (dfast) *dfast = readout_fast_.value.transpose() * dpre;
  if (dslow) *dslow = readout_slow_.value.transpose() * dpre;
}

// --- lattice mode ----------------------------------------------------------------

LatticeForward TransducerModel::lattice_forward(const EncoderOutput& enc,
                                                const LabelSequence& y) const {
  if (!config_.decoder.lattice_factorizable()) {
    std::string flags;
    for (const auto& f : config_.decoder.non_factorizable_flags()) flags += " model." + f;
    throw ConfigError("model is not lattice-factorizable (offending flags:" + flags + ")");
  }
  const int big_n = static_cast<int>(y.size());
  const int frames = enc.frames();
  LatticeForward out;
  out.y = y;
  out.slow_inputs.setZero(vocab_size(), big_n + 1);
  out.slow_inputs(kBlank, 0) = 1.0;
  for (int n = 0; n < big_n; ++n) {
    if (!config_.vocab.is_label(y[n])) throw DimensionError("target symbol outside vocabulary");
    out.slow_inputs(y[n], n + 1) = 1.0;
  }
  out.slow = recurrent_forward(slow_, {out.slow_inputs});
  out.lattice = EmissionLattice(config_.topology, frames, big_n, vocab_size());
  out.readout.resize(big_n + 1);
  for (int n = 0; n <= big_n; ++n) {
    const Eigen::MatrixXd lp =
        readout_forward(enc.h, out.slow.col(n).replicate(1, frames), &out.readout[n]);
    for (int t = 0; t < frames; ++t) out.lattice.node(t, n) = lp.col(t).transpose();
  }
  return out;
}

Eigen::MatrixXd TransducerModel::lattice_backward(const LatticeForward& fwd,
                                                  const Eigen::MatrixXd& dtable) {
  const int big_n = static_cast<int>(fwd.y.size());
  const int frames = fwd.lattice.frames();
  Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(fwd.readout.front().fast.rows(), frames);
  Eigen::MatrixXd dslow = Eigen::MatrixXd::Zero(fwd.slow.rows(), big_n + 1);
  Eigen::MatrixXd g(vocab_size(), frames);
  for (int n = 0; n <= big_n; ++n) {
    for (int t = 0; t < frames; ++t) g.col(t) = dtable.row(fwd.lattice.row(t, n)).transpose();
    if (g.isZero(0.0)) continue;
    Eigen::MatrixXd df, ds;
    readout_backward(fwd.readout[n], g, &df, &ds);
    dh += df;
    dslow.col(n) = ds.rowwise().sum();
  }
  recurrent_backward(slow_, {fwd.slow_inputs}, fwd.slow, std::move(dslow));
  return dh;
}

// --- teacher-forced alignment mode -------------------------------------------------

AlignedForward TransducerModel::aligned_forward(const EncoderOutput& enc,
                                                const std::vector<Symbol>& symbols,
                                                const std::vector<Symbol>& feedback) const {
  const auto& dec = config_.decoder;
  const int frames = enc.frames();
  const int v = vocab_size();
  AlignedForward out;
  out.symbols = symbols;
  out.frames = frames;
  out.feedback = feedback.empty() ? symbols : feedback;
  if (out.feedback.size() != symbols.size())
    throw DimensionError("feedback stream length differs from alignment length");
  if (symbols.empty()) throw ValidationError("empty alignment");
  for (std::size_t u = 0; u < symbols.size(); ++u)
    if (!config_.vocab.is_valid(symbols[u]) || !config_.vocab.is_valid(out.feedback[u]))
      throw DimensionError("alignment symbol outside vocabulary");
  out.nodes = replay_nodes(config_.topology, symbols);
  for (const auto& node : out.nodes)
    if (node.t >= frames)
      throw DimensionError("alignment consumes more frames than the encoder produced");
  const auto last_emit = last_emit_steps(config_.topology, symbols);
  const int u_len = static_cast<int>(symbols.size());
  const int counts = out.nodes.back().n + 1;

  // Slow inputs: for count n, the label fed at its first step u'_n.
  Eigen::MatrixXd slow_labels = Eigen::MatrixXd::Zero(v, counts);
  Eigen::MatrixXd slow_enc;
  if (dec.encoder_to_slow) slow_enc.resize(enc.h.rows(), counts);
  for (int u = 0; u < u_len; ++u) {
    if (last_emit[u] != u) continue;
    const int n = out.nodes[u].n;
    const Symbol label = u == 0 ? kBlank : out.feedback[u - 1];
    slow_labels(label, n) = 1.0;
    if (dec.encoder_to_slow) slow_enc.col(n) = enc.h.col(out.nodes[u].t);
  }
  out.slow_inputs.push_back(std::move(slow_labels));
  if (dec.encoder_to_slow) out.slow_inputs.push_back(std::move(slow_enc));
  out.slow = recurrent_forward(slow_, out.slow_inputs);

  Eigen::MatrixXd slow_cols(out.slow.rows(), u_len);
  Eigen::MatrixXd enc_cols(enc.h.rows(), u_len);
  for (int u = 0; u < u_len; ++u) {
    slow_cols.col(u) = out.slow.col(out.nodes[u].n);
    enc_cols.col(u) = enc.h.col(out.nodes[u].t);
  }
  if (dec.use_fast_rnn) {
    out.fast_inputs.push_back(slow_cols);
    if (dec.label_feedback) {
      Eigen::MatrixXd prev = Eigen::MatrixXd::Zero(v, u_len);
      for (int u = 0; u < u_len; ++u) prev(u == 0 ? kBlank : out.feedback[u - 1], u) = 1.0;
      out.fast_inputs.push_back(std::move(prev));
    }
    out.fast_inputs.push_back(enc_cols);
    out.fast = recurrent_forward(fast_, out.fast_inputs);
  } else {
    out.fast = enc_cols;
  }
  out.log_probs = readout_forward(out.fast, slow_cols, &out.readout);
  return out;
}

Eigen::MatrixXd TransducerModel::aligned_backward(const AlignedForward& fwd, const Eigen::MatrixXd& g) {
  const auto& dec = config_.decoder;
  const int u_len = static_cast<int>(fwd.symbols.size());
  Eigen::MatrixXd dfast, dslow_cols;
  readout_backward(fwd.readout, g, &dfast, &dslow_cols);

  Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(config_.encoder.hidden_dim, fwd.frames);
  Eigen::MatrixXd dslow = Eigen::MatrixXd::Zero(fwd.slow.rows(), fwd.slow.cols());

  if (dec.use_fast_rnn) {
    const auto din = recurrent_backward(fast_, fwd.fast_inputs, fwd.fast, dfast);
    dslow_cols += din.front();
    const Eigen::MatrixXd& denc = din.back();
    for (int u = 0; u < u_len; ++u) dh.col(fwd.nodes[u].t) += denc.col(u);
  } else {
    for (int u = 0; u < u_len; ++u) dh.col(fwd.nodes[u].t) += dfast.col(u);
  }
  for (int u = 0; u < u_len; ++u) dslow.col(fwd.nodes[u].n) += dslow_cols.col(u);

  const auto din = recurrent_backward(slow_, fwd.slow_inputs, fwd.slow, std::move(dslow));
  if (dec.encoder_to_slow) {
    const auto last_emit = last_emit_steps(config_.topology, fwd.symbols);
    for (int u = 0; u < u_len; ++u)
      if (last_emit[u] == u) dh.col(fwd.nodes[u].t) += din[1].col(fwd.nodes[u].n);
  }
  return dh;
}

// --- stepwise ----------------------------------------------------------------------

DecoderState TransducerModel::initial_state(const Eigen::MatrixXd& h) const {
  DecoderState s;
  const int slow_dim = config_.decoder.slow_dim;
  s.slow = slow_step(Eigen::VectorXd::Zero(slow_dim), kBlank, h.col(0));
  if (config_.decoder.use_fast_rnn) s.fast = Eigen::VectorXd::Zero(config_.decoder.fast_dim);
  return s;
}

StepOutput TransducerModel::step(const Eigen::MatrixXd& h, const DecoderState& state) const {
  StepOutput out;
  out.fast = fast_step(state.fast, state.slow, state.prev, h.col(state.t));
  out.log_probs = emit_distribution(out.fast, state.slow);
  return out;
}

DecoderState TransducerModel::advance(const Eigen::MatrixXd& h, const DecoderState& state,
                                      const StepOutput& out, Symbol symbol) const {
  DecoderState next = state;
  if (config_.decoder.use_fast_rnn) next.fast = out.fast;
  next.u = state.u + 1;
  next.t = state.t + delta_t(config_.topology, symbol);
  const bool emitted = delta_n(config_.topology, symbol, state.prev) != 0;
  next.prev = symbol;
  if (emitted) {
    next.n = state.n + 1;
    next.last_label = symbol;
    next.last_emit = next.u;
    // Past the last frame there is no further step to condition.
    if (next.t < h.cols()) next.slow = slow_step(state.slow, symbol, h.col(next.t));
  }
  return next;
}

// --- auxiliary CTC head -----------------------------------------------------------

Eigen::MatrixXd TransducerModel::aux_log_probs(const Eigen::MatrixXd& h) const {
  const Eigen::MatrixXd logits = (aux_w_.value * h).colwise() + aux_b_.value.col(0);
  return column_log_softmax(logits, nullptr);
}

Eigen::MatrixXd TransducerModel::aux_backward(const Eigen::MatrixXd& h,
                                              const Eigen::MatrixXd& log_probs,
                                              const Eigen::MatrixXd& g) {
  const Eigen::MatrixXd dlogits = log_softmax_backward(exp_of(log_probs), g);
  aux_w_.grad.noalias() += dlogits * h.transpose();
  aux_b_.grad += dlogits.rowwise().sum();
  return aux_w_.value.transpose() * dlogits;
}

// --- free functions -----------------------------------------------------------------

FactorizedDistribution joint_to_factorized(const Eigen::VectorXd& p) {
  if (p.size() < 2) throw DimensionError("distribution needs blank and at least one label");
  const Eigen::VectorXd labels = p.tail(p.size() - 1);
  const double label_mass = labels.sum();
  if (!(label_mass > 0.0)) throw ValidationError("degenerate distribution: p(blank) = 1");
  return {p(0), labels / label_mass};
}

Eigen::VectorXd factorized_to_joint(const FactorizedDistribution& f) {
  Eigen::VectorXd p(f.labels.size() + 1);
  p(0) = f.blank;
  p.tail(f.labels.size()) = (1.0 - f.blank) * f.labels;
  return p;
}

EmissionLattice lattice_emissions(const TransducerModel& model, const Eigen::MatrixXd& x,
                                  const LabelSequence& y) {
  return model.lattice_forward(model.encode(x), y).lattice;
}

}  // namespace ltx
