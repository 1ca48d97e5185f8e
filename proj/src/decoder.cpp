#include "ltx/decoder.hpp"

#include "ltx/error.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace ltx {

std::string_view merge_mode_name(MergeMode mode) {
  switch (mode) {
    case MergeMode::kNone: return "none";
    case MergeMode::kSum: return "sum";
    case MergeMode::kMax: return "max";
  }
  return "none";
}

MergeMode parse_merge_mode(std::string_view tag) {
  if (tag == "none") return MergeMode::kNone;
  if (tag == "sum") return MergeMode::kSum;
  if (tag == "max") return MergeMode::kMax;
  throw ConfigError("unknown merge mode '" + std::string(tag) + "' (expected none, sum or max)");
}

StepOutput LatticeScorer::step(const DecoderState& state) const {
  StepOutput out;
  out.log_probs = lattice_.node(state.t, state.n).transpose();
  if (state.n == lattice_.labels())
    for (Symbol s = 1; s < vocab_size(); ++s)
      if (delta_n(topology(), s, state.prev)) out.log_probs(s) = kLogZero<double>;
  return out;
}

DecoderState LatticeScorer::advance(const DecoderState& state, const StepOutput&, Symbol symbol) const {
  DecoderState next = state;
  next.u = state.u + 1;
  next.t = state.t + delta_t(topology(), symbol);
  if (delta_n(topology(), symbol, state.prev)) {
    next.n = state.n + 1;
    next.last_label = symbol;
    next.last_emit = next.u;
  }
  next.prev = symbol;
  return next;
}

std::vector<std::string> hypothesis_words(Topology kind, const std::vector<Symbol>& path,
                                          const Vocab* vocab, const BpeMergeMap* merges) {
  std::vector<std::string> units;
  for (Symbol s : collapse(kind, path)) units.push_back(vocab ? vocab->name(s) : std::to_string(s));
  static const BpeMergeMap kNoMerges;
  return (merges ? *merges : kNoMerges).to_words(units);
}

std::string canonical_key(Topology kind, const std::vector<Symbol>& path, const Vocab* vocab,
                          const BpeMergeMap* merges) {
  std::string key;
  for (const auto& w : hypothesis_words(kind, path, vocab, merges)) {
    if (!key.empty()) key += ' ';
    key += w;
  }
  return key;
}

namespace {

bool path_less(const std::vector<Symbol>& a, const std::vector<Symbol>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                      [](Symbol x, Symbol y) { return tie_rank(x) < tie_rank(y); });
}

bool hyp_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_score != b.log_score) return a.log_score > b.log_score;
  if (a.key != b.key) return a.key < b.key;
  return path_less(a.path, b.path);
}

}  // namespace

void sort_beam(std::vector<Hypothesis>& beam) { std::stable_sort(beam.begin(), beam.end(), hyp_before); }

std::vector<Hypothesis> recombine(std::vector<Hypothesis> beam, MergeMode mode, Topology kind) {
  if (mode == MergeMode::kNone) return beam;
  std::unordered_map<std::string, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < beam.size(); ++i) {
    std::string g = beam[i].key;
    if (kind == Topology::kRnnt) g += '\x1f' + std::to_string(beam[i].state.t);
    const auto [it, fresh] = group_of.emplace(std::move(g), groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  std::vector<Hypothesis> out;
  out.reserve(groups.size());
  for (const auto& members : groups) {
    std::size_t best = members.front();
    for (std::size_t i : members)
      if (hyp_before(beam[i], beam[best])) best = i;
    Hypothesis survivor = std::move(beam[best]);
    if (mode == MergeMode::kSum && members.size() > 1) {
      std::vector<double> scores;
      for (std::size_t i : members) scores.push_back(i == best ? survivor.log_score : beam[i].log_score);
      survivor.log_score = logsumexp(std::span<const double>(scores));
    }
    out.push_back(std::move(survivor));
  }
  return out;
}

DecodeResult beam_search(const StepScorer& scorer, const BeamOptions& options) {
  if (options.beam_size < 1) throw ConfigError("beam size must be >= 1");
  const int frames = scorer.frames();
  if (frames < 1) throw ValidationError("cannot decode an empty input");
  const Topology kind = scorer.topology();
  const int vocab_size = scorer.vocab_size();
  const int label_cap = static_cast<int>(std::ceil(options.ratio_cap * frames));

  std::vector<Hypothesis> beam(1);
  beam[0].state = scorer.initial_state();
  beam[0].key = canonical_key(kind, {}, options.vocab, options.merges);

  auto all_finished = [&] {
    return std::all_of(beam.begin(), beam.end(), [](const Hypothesis& h) { return h.finished; });
  };
  while (!all_finished()) {
    std::vector<Hypothesis> next;
    next.reserve(beam.size() * static_cast<std::size_t>(vocab_size));
    for (auto& hyp : beam) {
      if (hyp.finished) {
        next.push_back(std::move(hyp));
        continue;
      }
      const StepOutput out = scorer.step(hyp.state);
      for (Symbol s = 0; s < vocab_size; ++s) {
        const double lp = out.log_probs(s);
        if (is_log_zero(lp)) continue;
        if (kind == Topology::kRnnt && s != kBlank && hyp.state.n >= label_cap) continue;
        Hypothesis ext;
        ext.path = hyp.path;
        ext.path.push_back(s);
        ext.log_score = hyp.log_score + lp;
        ext.state = scorer.advance(hyp.state, out, s);
        ext.finished = ext.state.t >= frames;
        ext.key = canonical_key(kind, ext.path, options.vocab, options.merges);
        next.push_back(std::move(ext));
      }
    }
    if (next.empty()) throw ValidationError("beam search found no path with nonzero probability");
    next = recombine(std::move(next), options.merge, kind);
    sort_beam(next);
    if (static_cast<int>(next.size()) > options.beam_size) next.resize(options.beam_size);
    beam = std::move(next);
  }

  const Hypothesis& best = beam.front();
  DecodeResult result;
  result.labels = collapse(kind, best.path);
  result.path = {kind, best.path, frames, static_cast<int>(result.labels.size())};
  result.words = hypothesis_words(kind, best.path, options.vocab, options.merges);
  result.log_score = best.log_score;
  return result;
}

DecodeResult beam_search(const TransducerModel& model, const Eigen::MatrixXd& x,
                         const BeamOptions& options) {
  const EncoderOutput enc = model.encode(x);
  BeamOptions opts = options;
  if (!opts.vocab) opts.vocab = &model.vocab();
  return beam_search(ModelScorer(model, enc.h), opts);
}

}  // namespace ltx
