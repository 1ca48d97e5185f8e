#ifndef LTX_DATAIO_HPP
#define LTX_DATAIO_HPP

#include "ltx/lattice.hpp"
#include "ltx/topology.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ltx {

// Persisted forced alignment of one sequence.
struct AlignmentRecord {
  std::string id;
  AlignmentPath path;

  bool operator==(const AlignmentRecord&) const = default;
};

// One corpus entry. Features are T' x D, one row per input frame.
struct Example {
  std::string id;
  std::string recording;
  Eigen::MatrixXd features;
  LabelSequence labels;
  // Ground-truth alignments per topology, when known.
  std::map<Topology, AlignmentRecord> alignments;
};

using Corpus = std::vector<Example>;

struct SyntheticTaskConfig {
  int num_labels = 5;
  int min_frames = 10;
  int max_frames = 20;
  // Segment length is 1 + Geometric: P(len = l) = (1 - dwell) * dwell^(l-1).
  double dwell = 0.5;
  double blank_gap_prob = 0.2;
  double noise = 0.3;
  int feature_dim = 0;  // 0 means num_labels + 1
  int sequences = 100;
  int sequences_per_recording = 10;
  std::string id_prefix = "seq";
  std::uint64_t seed = 1;

  void validate() const;
};

// Latent frame symbols, one per frame; blank marks gap frames.
struct LatentSequence {
  std::vector<Symbol> frames;
};

LatentSequence sample_latent(const SyntheticTaskConfig& config, std::mt19937_64& rng);
// Ground-truth alignment of a latent frame labelling under each topology.
std::vector<Symbol> latent_to_alignment(Topology kind, const std::vector<Symbol>& latent);
Corpus generate_corpus(const SyntheticTaskConfig& config);

// --- metrics -----------------------------------------------------------------

template <typename T>
std::size_t edit_distance(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// id -> word sequence.
using Transcripts = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct ScoreReport {
  std::size_t errors = 0;
  std::size_t ref_words = 0;
  std::size_t sentences = 0;
  std::size_t sentence_errors = 0;
  double error_rate = 0.0;  // percent
};

// Hypotheses are matched to references by id; throws ValidationError naming
// the first id present on one side only.
ScoreReport error_rate(const Transcripts& hyps, const Transcripts& refs);

// Groups consecutive sequences of the same recording into windows of C and
// concatenates them. Alignments are dropped.
Corpus concat_eval_set(const Corpus& corpus, int group);

// --- BPE -----------------------------------------------------------------------

inline constexpr std::string_view kBpeContinuation = "@@";

struct BpeRule {
  std::string left;
  std::string right;
  std::string merged;
  bool operator==(const BpeRule&) const = default;
};

class BpeMergeMap {
 public:
  BpeMergeMap() = default;
  explicit BpeMergeMap(std::vector<BpeRule> rules) : rules_(std::move(rules)) {}

  const std::vector<BpeRule>& rules() const { return rules_; }
  bool empty() const { return rules_.empty(); }

  // First listed applicable rule at its leftmost occurrence, until no rule
  // applies.
  std::vector<std::string> apply(std::vector<std::string> units) const;
  // apply(), then glue every unit ending in "@@" to its successor.
  std::vector<std::string> to_words(const std::vector<std::string>& units) const;

 private:
  std::vector<BpeRule> rules_;
};

// --- file formats ------------------------------------------------------------------

void write_alignments(std::ostream& out, const std::vector<AlignmentRecord>& records);
std::vector<AlignmentRecord> read_alignments(std::istream& in, const std::string& source = "");
void write_alignments(const std::filesystem::path& path, const std::vector<AlignmentRecord>& records);
std::vector<AlignmentRecord> read_alignments(const std::filesystem::path& path);

struct LatticeRecord {
  std::string id;
  EmissionLattice lattice;
  LabelSequence labels;
};
void write_lattices(std::ostream& out, const std::vector<LatticeRecord>& records);
std::vector<LatticeRecord> read_lattices(std::istream& in, const std::string& source = "");
void write_lattices(const std::filesystem::path& path, const std::vector<LatticeRecord>& records);
std::vector<LatticeRecord> read_lattices(const std::filesystem::path& path);

void write_merges(std::ostream& out, const BpeMergeMap& merges);
BpeMergeMap read_merges(std::istream& in, const std::string& source = "");
BpeMergeMap read_merges(const std::filesystem::path& path);

// Features: per sequence a header "id<TAB>recording<TAB>T<TAB>D" and T rows.
void write_features(std::ostream& out, const Corpus& corpus);
Corpus read_features(std::istream& in, const std::string& source = "");

// Transcript lines "id<TAB>w1 w2 ..." with an optional third score column.
struct TranscriptLine {
  std::string id;
  std::vector<std::string> words;
  std::optional<double> score;
};
void write_transcripts(std::ostream& out, const std::vector<TranscriptLine>& lines);
std::vector<TranscriptLine> read_transcripts(std::istream& in, const std::string& source = "");
std::vector<TranscriptLine> read_transcripts(const std::filesystem::path& path);
Transcripts to_transcripts(const std::vector<TranscriptLine>& lines);

std::vector<std::string> label_words(const Vocab& vocab, const LabelSequence& labels);
LabelSequence words_to_labels(const Vocab& vocab, const std::vector<std::string>& words,
                              const std::string& id);

// Corpus directory layout used by the command-line tool:
//   <split>.features, <split>.ref, <split>.<topology>.align
struct CorpusFiles {
  std::filesystem::path dir;
  std::string split;

  std::filesystem::path features() const { return dir / (split + ".features"); }
  std::filesystem::path references() const { return dir / (split + ".ref"); }
  std::filesystem::path alignments(Topology kind) const {
    return dir / (split + "." + std::string(topology_name(kind)) + ".align");
  }
};

void write_corpus(const CorpusFiles& files, const Corpus& corpus, const Vocab& vocab);
// Loads features and references; ground-truth alignments are attached when
// their files exist.
Corpus read_corpus(const CorpusFiles& files, const Vocab& vocab);

// Rejects a record whose symbols are not a valid path for its own
// (T, collapse(symbols)).
void validate_record(const AlignmentRecord& record);

std::string format_double(double v);
double parse_double(std::string_view text, const std::string& source, std::size_t line);

}  // namespace ltx

#endif  // LTX_DATAIO_HPP
