#include "ltx/decoder.hpp"
#include "ltx/error.hpp"
#include "ltx/gradcheck.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

using namespace ltx;

namespace {

Hypothesis hyp(std::vector<Symbol> path, double score, Topology kind = Topology::kRna, int t = 0) {
  Hypothesis h;
  h.path = std::move(path);
  h.log_score = score;
  h.key = canonical_key(kind, h.path, nullptr, nullptr);
  h.state.t = t;
  return h;
}

Eigen::MatrixXd random_input(int frames, int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(frames, dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return x;
}

bool rank_less(const std::vector<Symbol>& a, const std::vector<Symbol>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                      [](Symbol x, Symbol y) { return tie_rank(x) < tie_rank(y); });
}

struct Best {
  std::vector<Symbol> path;
  double score = kLogZero<double>;
};

// Every label sequence up to max_labels, every path for it, scored on the
// model's own emission lattice.
Best exhaustive_best(const TransducerModel& model, const Eigen::MatrixXd& x, int frames, int max_labels) {
  Best best;
  const int k = model.vocab().num_labels();
  std::function<void(LabelSequence&)> visit = [&](LabelSequence& y) {
    if (is_reachable(model.topology(), frames, y)) {
      const EmissionLattice lat = lattice_emissions(model, x, y);
      for (const auto& p : enumerate_paths(model.topology(), frames, y, model.vocab())) {
        const double s = path_log_prob(lat, p.symbols);
        if (s > best.score || (s == best.score && rank_less(p.symbols, best.path))) best = {p.symbols, s};
      }
    }
    if (static_cast<int>(y.size()) == max_labels) return;
    for (Symbol s = 1; s <= k; ++s) {
      y.push_back(s);
      visit(y);
      y.pop_back();
    }
  };
  LabelSequence y;
  visit(y);
  return best;
}

}  // namespace

TEST_CASE("merge mode names") {
  for (auto m : {MergeMode::kNone, MergeMode::kSum, MergeMode::kMax})
    CHECK(parse_merge_mode(merge_mode_name(m)) == m);
  CHECK_THROWS_AS(parse_merge_mode("avg"), ConfigError);
}

TEST_CASE("canonical keys") {
  const Vocab vocab(std::vector<std::string>{"he@@", "llo", "x"});
  CHECK(canonical_key(Topology::kCtc, {1, 1, 0, 1}, nullptr, nullptr) == "1 1");
  CHECK(canonical_key(Topology::kCtc, {1, 1, 2, 0}, nullptr, nullptr) == "1 2");
  CHECK(canonical_key(Topology::kRna, {1, 1, 0, 1}, nullptr, nullptr) == "1 1 1");
  CHECK(canonical_key(Topology::kRnnt, {0, 2, 0}, &vocab, nullptr) == "llo");
  CHECK(canonical_key(Topology::kRna, {}, &vocab, nullptr).empty());
  // Subword units collapse to the same word sequence.
  CHECK(canonical_key(Topology::kRna, {1, 2, 0, 3}, &vocab, nullptr) == "hello x");
  const BpeMergeMap merges({{"he@@", "llo", "hello"}});
  CHECK(canonical_key(Topology::kRna, {1, 0, 2, 3}, &vocab, &merges) == "hello x");
  CHECK(hypothesis_words(Topology::kRna, {3, 3}, &vocab, &merges) == std::vector<std::string>{"x", "x"});
}

TEST_CASE("recombination") {
  SUBCASE("distinct keys leave the beam unchanged") {
    std::vector<Hypothesis> beam{hyp({1, 0}, -1.0), hyp({2, 0}, -2.0), hyp({0, 0}, -0.5)};
    for (auto mode : {MergeMode::kNone, MergeMode::kSum, MergeMode::kMax}) {
      const auto out = recombine(beam, mode, Topology::kRna);
      REQUIRE(out.size() == 3);
      for (std::size_t i = 0; i < 3; ++i) {
        CHECK(out[i].path == beam[i].path);
        CHECK(out[i].log_score == beam[i].log_score);
      }
    }
  }
  SUBCASE("sum and max") {
    std::vector<Hypothesis> beam{hyp({1, 0}, std::log(0.25)), hyp({0, 1}, std::log(0.25)),
                                 hyp({2, 0}, std::log(0.1))};
    const auto summed = recombine(beam, MergeMode::kSum, Topology::kRna);
    REQUIRE(summed.size() == 2);
    CHECK(summed[0].log_score == doctest::Approx(std::log(0.5)).epsilon(1e-15));
    CHECK(summed[0].path == std::vector<Symbol>{1, 0});  // tie goes to the label-first path
    CHECK(summed[1].log_score == std::log(0.1));
    const auto maxed = recombine(beam, MergeMode::kMax, Topology::kRna);
    REQUIRE(maxed.size() == 2);
    CHECK(maxed[0].log_score == std::log(0.25));
    CHECK(recombine(beam, MergeMode::kNone, Topology::kRna).size() == 3);
  }
  SUBCASE("the best member survives with its state") {
    std::vector<Hypothesis> beam{hyp({0, 1}, -3.0), hyp({1, 0}, -1.0)};
    beam[1].state.n = 7;
    const auto out = recombine(beam, MergeMode::kSum, Topology::kRna);
    REQUIRE(out.size() == 1);
    CHECK(out[0].path == std::vector<Symbol>{1, 0});
    CHECK(out[0].state.n == 7);
    CHECK(out[0].log_score == doctest::Approx(std::log(std::exp(-3.0) + std::exp(-1.0))));
  }
  SUBCASE("RNN-T only merges hypotheses on the same frame") {
    std::vector<Hypothesis> beam{hyp({1, 0}, -1.0, Topology::kRnnt, 1), hyp({1}, -1.0, Topology::kRnnt, 0),
                                 hyp({0, 1}, -2.0, Topology::kRnnt, 1)};
    CHECK(recombine(beam, MergeMode::kSum, Topology::kRnnt).size() == 2);
    CHECK(recombine(beam, MergeMode::kSum, Topology::kRna).size() == 1);
  }
}

TEST_CASE("beam ordering") {
  std::vector<Hypothesis> beam{hyp({0, 1}, -1.0), hyp({2}, -1.0), hyp({1, 0}, -1.0), hyp({1}, -0.5)};
  sort_beam(beam);
  CHECK(beam[0].path == std::vector<Symbol>{1});
  CHECK(beam[1].path == std::vector<Symbol>{1, 0});
  CHECK(beam[2].path == std::vector<Symbol>{0, 1});
  CHECK(beam[3].path == std::vector<Symbol>{2});
}

TEST_CASE("one-hot lattices decode to the planted path at any beam size") {
  std::mt19937_64 rng(21);
  const Vocab vocab(3);
  for (Topology kind : {Topology::kCtc, Topology::kRna, Topology::kRnnt}) {
    for (int trial = 0; trial < 20; ++trial) {
      const int frames = 2 + trial % 4;
      LabelSequence y = ltx::testing::random_labels(1 + trial % 3, 3, rng);
      while (!is_reachable(kind, frames, y)) y.pop_back();
      const auto paths = enumerate_paths(kind, frames, y, vocab);
      const auto& planted = paths[std::uniform_int_distribution<std::size_t>(0, paths.size() - 1)(rng)];
      EmissionLattice lat(kind, frames, static_cast<int>(y.size()), vocab.size());
      lat.table().setConstant(kLogZero<double>);
      lat.table().col(kBlank).setZero();
      const auto nodes = replay_nodes(kind, planted.symbols);
      for (std::size_t u = 0; u < planted.symbols.size(); ++u) {
        lat.node(nodes[u].t, nodes[u].n).setConstant(kLogZero<double>);
        lat.at(nodes[u].t, nodes[u].n, planted.symbols[u]) = 0.0;
      }
      for (int beam : {1, 2, 5, 12}) {
        BeamOptions opts;
        opts.beam_size = beam;
        const auto result = beam_search(LatticeScorer(lat), opts);
        CHECK(result.labels == y);
        CHECK(result.path.symbols == planted.symbols);
        CHECK(result.log_score == 0.0);
      }
    }
  }
}

TEST_CASE("saturated beam equals the exhaustive arg-max and the Viterbi path") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto kind = static_cast<Topology>(trial % 3);
    ModelConfig cfg = tiny_model_config(kind, 100 + trial);
    cfg.decoder.separate_blank_sigmoid = trial % 2 == 1;
    const TransducerModel model(cfg);
    const int frames = 1 + trial % 3;
    const Eigen::MatrixXd x = random_input(frames, cfg.encoder.input_dim, rng);

    BeamOptions opts;
    opts.beam_size = 100000;
    opts.ratio_cap = kind == Topology::kRnnt ? 1.0 : kDefaultRatioCap;
    const auto result = beam_search(model, x, opts);
    const Best oracle = exhaustive_best(model, x, frames, frames);
    CHECK(result.path.symbols == oracle.path);
    CHECK(result.log_score == doctest::Approx(oracle.score).epsilon(1e-9));

    const EmissionLattice lat = lattice_emissions(model, x, result.labels);
    const auto vit = viterbi_align(lat, result.labels);
    CHECK(vit.path.symbols == result.path.symbols);
    CHECK(std::abs(vit.score - result.log_score) <= 1e-9);
  }
}

TEST_CASE("larger beams never end with a worse score") {
  std::mt19937_64 rng(17);
  int strict = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const auto kind = static_cast<Topology>(trial % 3);
    ModelConfig cfg = tiny_model_config(kind, 500 + trial);
    cfg.vocab = Vocab(3);
    cfg.decoder.separate_blank_sigmoid = trial % 2 == 0;
    cfg.decoder.use_fast_rnn = trial % 4 == 1;
    cfg.decoder.label_feedback = trial % 4 == 1;
    const TransducerModel model(cfg);
    const Eigen::MatrixXd x = random_input(4 + trial % 4, cfg.encoder.input_dim, rng) * 3.0;
    double previous = kLogZero<double>;
    double greedy = 0.0;
    for (int beam : {1, 2, 4, 8, 12}) {
      BeamOptions opts;
      opts.beam_size = beam;
      const double score = beam_search(model, x, opts).log_score;
      CHECK(score >= previous - 1e-12);
      if (beam == 1) greedy = score;
      if (beam == 12 && score > greedy + 1e-9) ++strict;
      previous = score;
    }
  }
  CHECK(strict > 0);  // the search is not trivially greedy on these models
}

TEST_CASE("RNN-T label cap") {
  std::mt19937_64 rng(2);
  ModelConfig cfg = tiny_model_config(Topology::kRnnt, 9);
  const TransducerModel model(cfg);
  const Eigen::MatrixXd x = random_input(4, cfg.encoder.input_dim, rng);
  // Blanks get cheaper with every emitted label, so the best path emits as
  // many labels as the cap allows.
  EmissionLattice lat(Topology::kRnnt, 4, 20, 3);
  for (int t = 0; t < 4; ++t)
    for (int n = 0; n <= 20; ++n) {
      const double blank = std::exp(-20.0 + n);
      lat.node(t, n) << std::log(blank), std::log(0.99 * (1 - blank)), std::log(0.01 * (1 - blank));
    }
  for (double cap : {0.5, 1.0, 3.0}) {
    BeamOptions opts;
    opts.ratio_cap = cap;
    const auto result = beam_search(LatticeScorer(lat), opts);
    CHECK(static_cast<double>(result.labels.size()) == std::ceil(cap * 4));
    CHECK(beam_search(model, x, opts).labels.size() <= static_cast<std::size_t>(std::ceil(cap * 4)));
  }
}

TEST_CASE("lattice scorer cannot exceed the lattice's label count") {
  EmissionLattice lat(Topology::kRna, 3, 1, 3);
  for (Eigen::Index r = 0; r < lat.table().rows(); ++r) lat.table().row(r) << std::log(0.1), std::log(0.8), std::log(0.1);
  const auto result = beam_search(LatticeScorer(lat), BeamOptions{});
  CHECK(result.labels == LabelSequence{1});
  CHECK(result.log_score == doctest::Approx(std::log(0.8) + 2 * std::log(0.1)));
}

TEST_CASE("beam search errors") {
  EmissionLattice lat(Topology::kRna, 2, 0, 2);
  lat.table().setConstant(std::log(0.5));
  BeamOptions opts;
  opts.beam_size = 0;
  CHECK_THROWS_AS(beam_search(LatticeScorer(lat), opts), ConfigError);
  // N = 0 leaves only blanks.
  opts.beam_size = 3;
  const auto result = beam_search(LatticeScorer(lat), opts);
  CHECK(result.labels.empty());
  CHECK(result.log_score == doctest::Approx(2 * std::log(0.5)));
}

TEST_CASE("merged decoding keeps the best key's summed mass") {
  // Two frames, RNA, labels {a}: paths [a, b] and [b, a] share the key "a".
  EmissionLattice lat(Topology::kRna, 2, 2, 2);
  for (Eigen::Index r = 0; r < lat.table().rows(); ++r) lat.table().row(r) << std::log(0.6), std::log(0.4);
  BeamOptions opts;
  opts.beam_size = 12;
  opts.merge = MergeMode::kNone;
  auto best = beam_search(LatticeScorer(lat), opts);
  CHECK(best.labels.empty());
  CHECK(best.log_score == doctest::Approx(std::log(0.36)));
  opts.merge = MergeMode::kSum;
  best = beam_search(LatticeScorer(lat), opts);
  CHECK(best.labels == LabelSequence{1});
  CHECK(best.log_score == doctest::Approx(std::log(0.48)));
  opts.merge = MergeMode::kMax;
  best = beam_search(LatticeScorer(lat), opts);
  CHECK(best.labels.empty());
}
