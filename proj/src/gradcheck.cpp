#include "ltx/gradcheck.hpp"

#include "ltx/lattice.hpp"
#include "ltx/logspace.hpp"
#include "ltx/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace ltx {

double gradient_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

ParamCheck check_param_gradients(TransducerModel& model, const ModelObjective& objective, double eps,
                                 const std::vector<std::string>& prefixes, double fault) {
  auto selected = [&](const std::string& name) {
    if (prefixes.empty()) return true;
    return std::any_of(prefixes.begin(), prefixes.end(),
                       [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
  };
  model.zero_grad();
  objective(model, true);
  ParamCheck result;
  for (Param* p : model.params()) {
    if (!selected(p->name)) continue;
    const Eigen::MatrixXd analytic = fault * p->grad;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& w = p->value.data()[i];
      const double saved = w;
      w = saved + eps;
      const double plus = objective(model, false);
      w = saved - eps;
      const double minus = objective(model, false);
      w = saved;
      const double err = gradient_relative_error(analytic.data()[i], (plus - minus) / (2 * eps));
      ++result.checked;
      if (err > result.worst) {
        result.worst = err;
        result.worst_param = p->name;
      }
    }
  }
  return result;
}

ModelConfig tiny_model_config(Topology kind, std::uint64_t seed) {
  ModelConfig c;
  c.topology = kind;
  c.vocab = Vocab(2);
  c.encoder.input_dim = 3;
  c.encoder.hidden_dim = 4;
  c.decoder.slow_dim = 3;
  c.decoder.fast_dim = 3;
  c.decoder.readout_dim = 4;
  c.seed = seed;
  return c;
}

namespace {

struct Accumulator {
  std::map<std::string, GradCheckEntry> entries;
  std::vector<std::string> order;

  void add(const std::string& component, double tolerance, double worst, std::size_t checked) {
    auto [it, fresh] = entries.try_emplace(component);
    if (fresh) {
      order.push_back(component);
      it->second.component = component;
      it->second.tolerance = tolerance;
    }
    it->second.worst = std::max(it->second.worst, worst);
    it->second.checked += checked;
  }
};

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

LabelSequence random_target(int length, int labels, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(1, labels);
  LabelSequence y(static_cast<std::size_t>(length));
  for (auto& s : y) s = pick(rng);
  return y;
}

// Occupancy gradient of one random unnormalized lattice.
void lattice_instance(Accumulator& acc, int index, std::mt19937_64& rng, const GradCheckOptions& opt) {
  const auto kind = static_cast<Topology>(index % 3);
  const int frames = 1 + index % 5;
  int labels = (index / 3) % 4;
  if (kind != Topology::kRnnt) labels = std::min(labels, frames);
  LabelSequence y = random_target(labels, 2, rng);
  while (!is_reachable(kind, frames, y)) y.pop_back();
  const int v = 3;
  EmissionLattice lat(kind, frames, static_cast<int>(y.size()), v, false);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index r = 0; r < lat.table().rows(); ++r) {
    Eigen::VectorXd logits(v);
    for (int s = 0; s < v; ++s) logits(s) = normal(rng);
    lat.table().row(r) = log_softmax(logits).transpose();
  }
  const Eigen::MatrixXd analytic = -(opt.inject_fault ? 1.05 : 1.0) * occupancies(lat, y).gamma;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < lat.table().size(); ++i) {
    double& w = lat.table().data()[i];
    const double saved = w;
    w = saved + opt.eps;
    const double plus = full_sum_nll(lat, y).nll;
    w = saved - opt.eps;
    const double minus = full_sum_nll(lat, y).nll;
    w = saved;
    worst = std::max(worst, gradient_relative_error(analytic.data()[i], (plus - minus) / (2 * opt.eps)));
  }
  acc.add("lattice.occupancy", 1e-4, worst, static_cast<std::size_t>(lat.table().size()));
}

// Random valid alignment over the given frames.
std::vector<Symbol> random_alignment(Topology kind, int frames, const LabelSequence& y, const Vocab& vocab,
                                     std::mt19937_64& rng) {
  const auto paths = enumerate_paths(kind, frames, y, vocab);
  return paths[std::uniform_int_distribution<std::size_t>(0, paths.size() - 1)(rng)].symbols;
}

void model_instance(Accumulator& acc, int index, std::mt19937_64& rng, const GradCheckOptions& opt) {
  const auto kind = static_cast<Topology>(index % 3);
  const double fault = opt.inject_fault ? 1.05 : 1.0;
  ModelConfig base = tiny_model_config(kind, opt.seed * 1000 + static_cast<std::uint64_t>(index));
  base.decoder.separate_blank_sigmoid = (index / 3) % 2 == 1;
  base.encoder.pool_factor = index % 4 < 2 ? 1 : 2;
  base.encoder.layers = index % 5 == 4 ? 2 : 1;
  base.encoder.bidirectional = (index / 2) % 2 == 1;

  const int frames = 2 + index % 2;
  const int input_frames = frames * base.encoder.pool_factor - (base.encoder.pool_factor > 1 ? index % 2 : 0);
  const Eigen::MatrixXd x = random_matrix(input_frames, base.encoder.input_dim, rng);
  LabelSequence y = random_target(1 + index % 2, base.vocab.num_labels(), rng);
  while (!is_reachable(kind, frames, y)) y.pop_back();

  // Encoder alone.
  {
    TransducerModel model(base);
    const Eigen::MatrixXd w = random_matrix(base.encoder.hidden_dim, frames, rng);
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      const EncoderOutput enc = m.encode(x);
      if (acc_grads) m.encode_backward(enc, w);
      return (w.array() * enc.h.array()).sum();
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {"encoder."}, fault);
    acc.add("nnet.encoder", 1e-4, r.worst, r.checked);
  }

  // Readout heads on random state batches.
  {
    TransducerModel model(base);
    const Eigen::MatrixXd fast = random_matrix(base.encoder.hidden_dim, 3, rng);
    const Eigen::MatrixXd slow = random_matrix(base.decoder.slow_dim, 3, rng);
    const Eigen::MatrixXd g = random_matrix(model.vocab_size(), 3, rng);
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      ReadoutCache cache;
      const Eigen::MatrixXd lp = m.readout_forward(fast, slow, &cache);
      if (acc_grads) m.readout_backward(cache, g, nullptr, nullptr);
      return (g.array() * lp.array()).sum();
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {"readout."}, fault);
    acc.add(base.decoder.separate_blank_sigmoid ? "nnet.readout.factorized" : "nnet.readout.joint", 1e-4,
            r.worst, r.checked);
  }

  // Lattice emissions of the factorizable decoder.
  {
    TransducerModel model(base);
    const auto rows = static_cast<Eigen::Index>(frames * (y.size() + 1));
    const Eigen::MatrixXd g = random_matrix(rows, model.vocab_size(), rng);
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      const EncoderOutput enc = m.encode(x);
      const LatticeForward fwd = m.lattice_forward(enc, y);
      if (acc_grads) m.encode_backward(enc, m.lattice_backward(fwd, g));
      return (g.array() * fwd.lattice.table().array()).sum();
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {}, fault);
    acc.add("nnet.lattice_emissions", 1e-4, r.worst, r.checked);
  }

  // Teacher-forced decoder with FastRNN, label feedback and encoder feedback
  // switched on in rotation.
  ModelConfig rich = base;
  rich.decoder.use_fast_rnn = index % 2 == 0 || index % 3 == 0;
  rich.decoder.label_feedback = rich.decoder.use_fast_rnn && index % 4 != 1;
  rich.decoder.encoder_to_slow = index % 3 != 2;
  const std::vector<Symbol> alignment = random_alignment(kind, frames, y, rich.vocab, rng);
  {
    TransducerModel model(rich);
    const Eigen::MatrixXd g = random_matrix(model.vocab_size(), static_cast<Eigen::Index>(alignment.size()), rng);
    std::vector<Symbol> feedback = alignment;
    if (index % 2 == 1) feedback = switchout(alignment, 0.5, rich.vocab, rng);
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      const EncoderOutput enc = m.encode(x);
      const AlignedForward fwd = m.aligned_forward(enc, alignment, feedback);
      if (acc_grads) m.encode_backward(enc, m.aligned_backward(fwd, g));
      return (g.array() * fwd.log_probs.array()).sum();
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {}, fault);
    acc.add("nnet.aligned_decoder", 1e-4, r.worst, r.checked);
  }

  // End-to-end losses.
  TrainConfig train_cfg;
  train_cfg.aux_ctc_weight = 0.5;
  {
    TransducerModel model(base);
    std::vector<Example> batch(1);
    batch[0].id = "gradcheck";
    batch[0].features = x;
    batch[0].labels = y;
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      return loss_full_sum(m, batch, train_cfg, acc_grads).loss;
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {}, fault);
    acc.add("training.full_sum", 1e-3, r.worst, r.checked);
  }
  {
    TransducerModel model(rich);
    train_cfg.focal_gamma = 2.0;
    train_cfg.label_smoothing = 0.1;
    std::vector<AlignedExample> batch(1);
    batch[0].features = &x;
    batch[0].labels = y;
    batch[0].alignment = alignment;
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      return loss_frame_ce(m, batch, train_cfg, acc_grads).loss;
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {}, fault);
    acc.add("training.frame_ce", 1e-3, r.worst, r.checked);
  }
  {
    TransducerModel model(base);
    auto objective = [&](TransducerModel& m, bool acc_grads) {
      const EncoderOutput enc = m.encode(x);
      Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(enc.h.rows(), enc.h.cols());
      const double loss = aux_ctc_loss(m, enc.h, y, 0.7, acc_grads ? &dh : nullptr);
      if (acc_grads) m.encode_backward(enc, dh);
      return loss;
    };
    const auto r = check_param_gradients(model, objective, opt.eps, {"encoder.", "aux_ctc."}, fault);
    acc.add("training.aux_ctc", 1e-3, r.worst, r.checked);
  }
}

}  // namespace

std::vector<GradCheckEntry> run_gradient_suite(const GradCheckOptions& options) {
  Accumulator acc;
  std::mt19937_64 rng(options.seed);
  for (int i = 0; i < options.lattice_instances; ++i) lattice_instance(acc, i, rng, options);
  for (int i = 0; i < options.model_instances; ++i) model_instance(acc, i, rng, options);
  std::vector<GradCheckEntry> out;
  for (const auto& name : acc.order) out.push_back(acc.entries.at(name));
  return out;
}

}  // namespace ltx
