#include "ltx/dataio.hpp"

#include "ltx/error.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace ltx {

namespace {

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    out.emplace_back(text.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

template <typename Int>
Int parse_int(std::string_view text, const std::string& what, std::size_t line) {
  Int v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ParseError("bad " + what + " '" + std::string(text) + "'", static_cast<long>(line));
  return v;
}

std::string where(const std::string& source) { return source.empty() ? "" : source + ": "; }

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

std::string join(const std::vector<std::string>& parts, const char* sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string pad(std::size_t value, int width) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(std::string_view text, const std::string& source, std::size_t line) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ParseError(where(source) + "bad number '" + std::string(text) + "'", static_cast<long>(line));
  return v;
}

// --- synthetic task --------------------------------------------------------------

void SyntheticTaskConfig::validate() const {
  if (num_labels < 1) throw ConfigError("data.num_labels must be >= 1");
  if (min_frames < 1 || max_frames < min_frames)
    throw ConfigError("data.min_frames/max_frames must satisfy 1 <= min <= max");
  if (!(dwell >= 0.0 && dwell < 1.0)) throw ConfigError("data.dwell must be in [0, 1)");
  if (!(blank_gap_prob >= 0.0 && blank_gap_prob < 1.0))
    throw ConfigError("data.blank_gap_prob must be in [0, 1)");
  if (!(noise >= 0.0)) throw ConfigError("data.noise must be >= 0");
  if (feature_dim != 0 && feature_dim < num_labels + 1)
    throw ConfigError("data.feature_dim must be at least num_labels + 1");
  if (sequences < 0) throw ConfigError("data.sequences must be >= 0");
  if (sequences_per_recording < 1) throw ConfigError("data.sequences_per_recording must be >= 1");
}

LatentSequence sample_latent(const SyntheticTaskConfig& config, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> length(config.min_frames, config.max_frames);
  std::geometric_distribution<int> extra(1.0 - config.dwell);
  std::bernoulli_distribution gap(config.blank_gap_prob);
  const int frames = length(rng);

  LatentSequence out;
  Symbol last_label = kBlank;
  bool after_gap = true;
  while (static_cast<int>(out.frames.size()) < frames) {
    // With a single label, repeating it needs a separating gap.
    const bool forced_gap = !after_gap && config.num_labels == 1;
    if (!after_gap && (forced_gap || gap(rng))) {
      out.frames.insert(out.frames.end(), 1 + extra(rng), kBlank);
      after_gap = true;
      continue;
    }
    Symbol label;
    if (last_label == kBlank || after_gap) {
      label = std::uniform_int_distribution<int>(1, config.num_labels)(rng);
    } else {
      label = std::uniform_int_distribution<int>(1, config.num_labels - 1)(rng);
      if (label >= last_label) ++label;
    }
    out.frames.insert(out.frames.end(), 1 + extra(rng), label);
    last_label = label;
    after_gap = false;
  }
  out.frames.resize(static_cast<std::size_t>(frames));
  return out;
}

std::vector<Symbol> latent_to_alignment(Topology kind, const std::vector<Symbol>& latent) {
  std::vector<Symbol> out;
  for (std::size_t i = 0; i < latent.size(); ++i) {
    const bool starts = latent[i] != kBlank && (i == 0 || latent[i - 1] != latent[i]);
    switch (kind) {
      case Topology::kCtc:
        out.push_back(latent[i]);
        break;
      case Topology::kRna:
        out.push_back(starts ? latent[i] : kBlank);
        break;
      case Topology::kRnnt:
        if (starts) out.push_back(latent[i]);
        out.push_back(kBlank);
        break;
    }
  }
  return out;
}

Corpus generate_corpus(const SyntheticTaskConfig& config) {
  config.validate();
  const int dim = config.feature_dim == 0 ? config.num_labels + 1 : config.feature_dim;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, config.noise);
  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(config.sequences));
  for (int i = 0; i < config.sequences; ++i) {
    const auto latent = sample_latent(config, rng);
    const int frames = static_cast<int>(latent.frames.size());
    Example ex;
    ex.id = config.id_prefix + pad(static_cast<std::size_t>(i), 5);
    ex.recording = config.id_prefix + "-rec" +
                   pad(static_cast<std::size_t>(i / config.sequences_per_recording), 4);
    ex.features = Eigen::MatrixXd::Zero(frames, dim);
    for (int t = 0; t < frames; ++t) {
      ex.features(t, latent.frames[t]) = 1.0;
      if (config.noise > 0.0)
        for (int d = 0; d < dim; ++d) ex.features(t, d) += noise(rng);
    }
    ex.labels = collapse(Topology::kCtc, latent.frames);
    for (Topology kind : {Topology::kCtc, Topology::kRna, Topology::kRnnt}) {
      AlignmentRecord rec;
      rec.id = ex.id;
      rec.path = {kind, latent_to_alignment(kind, latent.frames), frames,
                  static_cast<int>(ex.labels.size())};
      ex.alignments.emplace(kind, std::move(rec));
    }
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

// --- metrics -----------------------------------------------------------------------

ScoreReport error_rate(const Transcripts& hyps, const Transcripts& refs) {
  std::unordered_map<std::string, const std::vector<std::string>*> by_id;
  for (const auto& [id, words] : hyps) {
    if (!by_id.emplace(id, &words).second) throw ValidationError("duplicate hypothesis id '" + id + "'");
  }
  ScoreReport report;
  for (const auto& [id, ref] : refs) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("no hypothesis for id '" + id + "'");
    const std::size_t errors = edit_distance(ref, *it->second);
    report.errors += errors;
    report.ref_words += ref.size();
    report.sentences += 1;
    report.sentence_errors += errors > 0 ? 1 : 0;
    by_id.erase(it);
  }
  if (!by_id.empty()) {
    // Report the first extra id in hypothesis order.
    for (const auto& [id, words] : hyps)
      if (by_id.count(id)) throw ValidationError("no reference for id '" + id + "'");
  }
  if (report.errors > 0)
    report.error_rate = 100.0 * static_cast<double>(report.errors) /
                        static_cast<double>(std::max<std::size_t>(report.ref_words, 1));
  return report;
}

Corpus concat_eval_set(const Corpus& corpus, int group) {
  if (group < 1) throw ConfigError("concatenation group size must be >= 1");
  Corpus out;
  std::size_t i = 0;
  while (i < corpus.size()) {
    std::size_t j = i + 1;
    while (j < corpus.size() && j - i < static_cast<std::size_t>(group) &&
           corpus[j].recording == corpus[i].recording)
      ++j;
    Example ex;
    ex.recording = corpus[i].recording;
    Eigen::Index rows = 0;
    for (std::size_t k = i; k < j; ++k) rows += corpus[k].features.rows();
    ex.features.resize(rows, corpus[i].features.cols());
    Eigen::Index at = 0;
    for (std::size_t k = i; k < j; ++k) {
      if (corpus[k].features.cols() != ex.features.cols())
        throw DimensionError("feature dimension differs within " + corpus[i].recording);
      ex.features.middleRows(at, corpus[k].features.rows()) = corpus[k].features;
      at += corpus[k].features.rows();
      ex.id += (k == i ? "" : "+") + corpus[k].id;
      ex.labels.insert(ex.labels.end(), corpus[k].labels.begin(), corpus[k].labels.end());
    }
    out.push_back(std::move(ex));
    i = j;
  }
  return out;
}

// --- BPE ---------------------------------------------------------------------------------

std::vector<std::string> BpeMergeMap::apply(std::vector<std::string> units) const {
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& rule : rules_) {
      for (std::size_t i = 0; i + 1 < units.size(); ++i) {
        if (units[i] == rule.left && units[i + 1] == rule.right) {
          units[i] = rule.merged;
          units.erase(units.begin() + static_cast<std::ptrdiff_t>(i) + 1);
          changed = true;
          break;
        }
      }
      if (changed) break;
    }
  }
  return units;
}

std::vector<std::string> BpeMergeMap::to_words(const std::vector<std::string>& units) const {
  std::vector<std::string> words;
  std::string pending;
  for (const auto& unit : apply(units)) {
    if (unit.size() >= kBpeContinuation.size() && unit.ends_with(kBpeContinuation)) {
      pending += unit.substr(0, unit.size() - kBpeContinuation.size());
      continue;
    }
    words.push_back(pending + unit);
    pending.clear();
  }
  if (!pending.empty()) words.push_back(pending);
  return words;
}

// --- alignment files ---------------------------------------------------------------------

void validate_record(const AlignmentRecord& record) {
  const auto& p = record.path;
  for (Symbol s : p.symbols)
    if (s < 0) throw ValidationError("alignment for '" + record.id + "' has a negative symbol id");
  const LabelSequence y = collapse(p.kind, p.symbols);
  if (!is_valid_path(p.kind, p.symbols, p.frames, y))
    throw ValidationError("alignment for '" + record.id + "' is not a valid " +
                          std::string(topology_name(p.kind)) + " path over " +
                          std::to_string(p.frames) + " frames");
  if (p.labels != static_cast<int>(y.size()))
    throw ValidationError("alignment for '" + record.id + "' has an inconsistent label count");
}

void write_alignments(std::ostream& out, const std::vector<AlignmentRecord>& records) {
  for (const auto& r : records) {
    out << r.id << '\t' << topology_name(r.path.kind) << '\t' << r.path.frames << '\t';
    for (std::size_t u = 0; u < r.path.symbols.size(); ++u)
      out << (u ? " " : "") << r.path.symbols[u];
    out << '\n';
  }
}

std::vector<AlignmentRecord> read_alignments(std::istream& in, const std::string& source) {
  std::vector<AlignmentRecord> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4)
      throw ParseError(where(source) + "expected 4 tab-separated fields", static_cast<long>(no));
    AlignmentRecord rec;
    rec.id = fields[0];
    try {
      rec.path.kind = parse_topology(fields[1]);
    } catch (const ConfigError&) {
      throw ParseError(where(source) + "unknown topology '" + fields[1] + "'", static_cast<long>(no));
    }
    rec.path.frames = parse_int<int>(fields[2], "frame count", no);
    for (const auto& tok : tokens(fields[3])) rec.path.symbols.push_back(parse_int<int>(tok, "symbol id", no));
    rec.path.labels = static_cast<int>(collapse(rec.path.kind, rec.path.symbols).size());
    validate_record(rec);
    out.push_back(std::move(rec));
  }
  return out;
}

void write_alignments(const std::filesystem::path& path, const std::vector<AlignmentRecord>& records) {
  auto out = open_out(path);
  write_alignments(out, records);
  finish(out, path);
}

std::vector<AlignmentRecord> read_alignments(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_alignments(in, path.string());
}

// --- lattice files -----------------------------------------------------------------------

void write_lattices(std::ostream& out, const std::vector<LatticeRecord>& records) {
  for (const auto& r : records) {
    const auto& lat = r.lattice;
    out << r.id << '\t' << topology_name(lat.kind()) << '\t' << lat.frames() << '\t' << lat.labels()
        << '\t' << lat.vocab_size() << '\t' << (lat.normalized() ? "norm" : "raw") << '\t';
    for (std::size_t i = 0; i < r.labels.size(); ++i) out << (i ? " " : "") << r.labels[i];
    out << '\n';
    for (Eigen::Index row = 0; row < lat.table().rows(); ++row) {
      for (Eigen::Index c = 0; c < lat.table().cols(); ++c)
        out << (c ? " " : "") << format_double(lat.table()(row, c));
      out << '\n';
    }
  }
}

std::vector<LatticeRecord> read_lattices(std::istream& in, const std::string& source) {
  std::vector<LatticeRecord> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 7)
      throw ParseError(where(source) + "expected a 7-field lattice header", static_cast<long>(no));
    LatticeRecord rec;
    rec.id = fields[0];
    Topology kind;
    try {
      kind = parse_topology(fields[1]);
    } catch (const ConfigError&) {
      throw ParseError(where(source) + "unknown topology '" + fields[1] + "'", static_cast<long>(no));
    }
    const int frames = parse_int<int>(fields[2], "frame count", no);
    const int labels = parse_int<int>(fields[3], "label count", no);
    const int vocab = parse_int<int>(fields[4], "vocabulary size", no);
    if (frames < 1 || labels < 0 || vocab < 2)
      throw ParseError(where(source) + "bad lattice dimensions", static_cast<long>(no));
    if (fields[5] != "norm" && fields[5] != "raw")
      throw ParseError(where(source) + "normalization flag must be norm or raw", static_cast<long>(no));
    for (const auto& tok : tokens(fields[6])) rec.labels.push_back(parse_int<int>(tok, "label id", no));
    if (static_cast<int>(rec.labels.size()) != labels)
      throw ParseError(where(source) + "label list length differs from N", static_cast<long>(no));
    rec.lattice = EmissionLattice(kind, frames, labels, vocab, fields[5] == "norm");
    auto& table = rec.lattice.table();
    for (Eigen::Index row = 0; row < table.rows(); ++row) {
      if (!std::getline(in, line))
        throw ParseError(where(source) + "lattice '" + rec.id + "' is truncated", static_cast<long>(no + 1));
      ++no;
      const auto values = tokens(line);
      if (static_cast<int>(values.size()) != vocab)
        throw ParseError(where(source) + "expected " + std::to_string(vocab) + " values", static_cast<long>(no));
      for (int c = 0; c < vocab; ++c) table(row, c) = parse_double(values[c], source, no);
    }
    try {
      rec.lattice.validate();
    } catch (const ValidationError& e) {
      throw ValidationError("lattice '" + rec.id + "': " + e.what());
    }
    for (Symbol s : rec.labels)
      if (s < 1 || s >= vocab) throw ValidationError("lattice '" + rec.id + "' has a label outside the vocabulary");
    out.push_back(std::move(rec));
  }
  return out;
}

void write_lattices(const std::filesystem::path& path, const std::vector<LatticeRecord>& records) {
  auto out = open_out(path);
  write_lattices(out, records);
  finish(out, path);
}

std::vector<LatticeRecord> read_lattices(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_lattices(in, path.string());
}

// --- merge files -------------------------------------------------------------------------

void write_merges(std::ostream& out, const BpeMergeMap& merges) {
  for (const auto& r : merges.rules()) out << r.left << ' ' << r.right << ' ' << r.merged << '\n';
}

BpeMergeMap read_merges(std::istream& in, const std::string& source) {
  std::vector<BpeRule> rules;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto toks = tokens(line);
    if (toks.empty() || toks[0].starts_with('#')) continue;
    if (toks.size() != 3)
      throw ParseError(where(source) + "merge rule needs 'left right merged'", static_cast<long>(no));
    rules.push_back({toks[0], toks[1], toks[2]});
  }
  return BpeMergeMap(std::move(rules));
}

BpeMergeMap read_merges(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_merges(in, path.string());
}

// --- features ----------------------------------------------------------------------------

void write_features(std::ostream& out, const Corpus& corpus) {
  for (const auto& ex : corpus) {
    out << ex.id << '\t' << ex.recording << '\t' << ex.features.rows() << '\t' << ex.features.cols() << '\n';
    for (Eigen::Index t = 0; t < ex.features.rows(); ++t) {
      for (Eigen::Index d = 0; d < ex.features.cols(); ++d)
        out << (d ? " " : "") << format_double(ex.features(t, d));
      out << '\n';
    }
  }
}

Corpus read_features(std::istream& in, const std::string& source) {
  Corpus corpus;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4)
      throw ParseError(where(source) + "expected a 4-field feature header", static_cast<long>(no));
    Example ex;
    ex.id = fields[0];
    ex.recording = fields[1];
    const int frames = parse_int<int>(fields[2], "frame count", no);
    const int dim = parse_int<int>(fields[3], "feature dimension", no);
    if (frames < 0 || dim < 1) throw ParseError(where(source) + "bad feature dimensions", static_cast<long>(no));
    ex.features.resize(frames, dim);
    for (int t = 0; t < frames; ++t) {
      if (!std::getline(in, line))
        throw ParseError(where(source) + "features of '" + ex.id + "' are truncated", static_cast<long>(no + 1));
      ++no;
      const auto values = tokens(line);
      if (static_cast<int>(values.size()) != dim)
        throw ParseError(where(source) + "expected " + std::to_string(dim) + " values", static_cast<long>(no));
      for (int d = 0; d < dim; ++d) ex.features(t, d) = parse_double(values[d], source, no);
    }
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

// --- transcripts -------------------------------------------------------------------------

void write_transcripts(std::ostream& out, const std::vector<TranscriptLine>& lines) {
  for (const auto& l : lines) {
    out << l.id << '\t' << join(l.words);
    if (l.score) out << '\t' << format_double(*l.score);
    out << '\n';
  }
}

std::vector<TranscriptLine> read_transcripts(std::istream& in, const std::string& source) {
  std::vector<TranscriptLine> out;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 2 && fields.size() != 3)
      throw ParseError(where(source) + "expected 'id<TAB>words[<TAB>score]'", static_cast<long>(no));
    TranscriptLine l;
    l.id = fields[0];
    l.words = tokens(fields[1]);
    if (fields.size() == 3) l.score = parse_double(fields[2], source, no);
    out.push_back(std::move(l));
  }
  return out;
}

std::vector<TranscriptLine> read_transcripts(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_transcripts(in, path.string());
}

Transcripts to_transcripts(const std::vector<TranscriptLine>& lines) {
  Transcripts out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.emplace_back(l.id, l.words);
  return out;
}

std::vector<std::string> label_words(const Vocab& vocab, const LabelSequence& labels) {
  std::vector<std::string> out;
  out.reserve(labels.size());
  for (Symbol s : labels) out.push_back(vocab.name(s));
  return out;
}

LabelSequence words_to_labels(const Vocab& vocab, const std::vector<std::string>& words,
                              const std::string& id) {
  LabelSequence out;
  out.reserve(words.size());
  for (const auto& w : words) {
    const Symbol s = vocab.find(w);
    if (s < 1) throw ValidationError("sequence '" + id + "': unknown label '" + w + "'");
    out.push_back(s);
  }
  return out;
}

// --- corpus directories -----------------------------------------------------------------

void write_corpus(const CorpusFiles& files, const Corpus& corpus, const Vocab& vocab) {
  {
    auto out = open_out(files.features());
    write_features(out, corpus);
    finish(out, files.features());
  }
  {
    std::vector<TranscriptLine> refs;
    for (const auto& ex : corpus) refs.push_back({ex.id, label_words(vocab, ex.labels), std::nullopt});
    auto out = open_out(files.references());
    write_transcripts(out, refs);
    finish(out, files.references());
  }
  for (Topology kind : {Topology::kCtc, Topology::kRna, Topology::kRnnt}) {
    std::vector<AlignmentRecord> records;
    for (const auto& ex : corpus) {
      const auto it = ex.alignments.find(kind);
      if (it != ex.alignments.end()) records.push_back(it->second);
    }
    if (records.empty()) continue;
    if (records.size() != corpus.size())
      throw ValidationError("some sequences lack a " + std::string(topology_name(kind)) + " alignment");
    write_alignments(files.alignments(kind), records);
  }
}

Corpus read_corpus(const CorpusFiles& files, const Vocab& vocab) {
  Corpus corpus;
  {
    auto in = open_in(files.features());
    corpus = read_features(in, files.features().string());
  }
  std::unordered_map<std::string, Example*> by_id;
  for (auto& ex : corpus)
    if (!by_id.emplace(ex.id, &ex).second) throw ValidationError("duplicate sequence id '" + ex.id + "'");

  std::unordered_map<std::string, bool> seen;
  for (const auto& line : read_transcripts(files.references())) {
    const auto it = by_id.find(line.id);
    if (it == by_id.end()) throw ValidationError("reference for unknown sequence '" + line.id + "'");
    it->second->labels = words_to_labels(vocab, line.words, line.id);
    seen[line.id] = true;
  }
  for (const auto& ex : corpus)
    if (!seen.count(ex.id)) throw ValidationError("no reference for sequence '" + ex.id + "'");

  for (Topology kind : {Topology::kCtc, Topology::kRna, Topology::kRnnt}) {
    if (!std::filesystem::exists(files.alignments(kind))) continue;
    for (auto& rec : read_alignments(files.alignments(kind))) {
      const auto it = by_id.find(rec.id);
      if (it == by_id.end()) throw ValidationError("alignment for unknown sequence '" + rec.id + "'");
      if (collapse(rec.path) != it->second->labels)
        throw ValidationError("alignment for '" + rec.id + "' does not collapse to its reference");
      it->second->alignments[kind] = std::move(rec);
    }
  }
  return corpus;
}

}  // namespace ltx
