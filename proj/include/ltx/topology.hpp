#ifndef LTX_TOPOLOGY_HPP
#define LTX_TOPOLOGY_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ltx {

// Output symbol id over the blank-augmented vocabulary. Blank is always 0,
// labels are 1..K.
using Symbol = int;
inline constexpr Symbol kBlank = 0;

using LabelSequence = std::vector<Symbol>;

enum class Topology { kCtc, kRna, kRnnt };

std::string_view topology_name(Topology kind);
// Parses "ctc", "rna" or "rnnt"; throws ConfigError otherwise.
Topology parse_topology(std::string_view tag);

// Label inventory. Ids are dense: 0 is blank, 1..num_labels are labels.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(int num_labels);
  explicit Vocab(std::vector<std::string> label_names);

  int num_labels() const { return static_cast<int>(names_.size()); }
  // |Σ'| including blank.
  int size() const { return num_labels() + 1; }
  bool is_valid(Symbol s) const { return s >= 0 && s < size(); }
  bool is_label(Symbol s) const { return s > 0 && s < size(); }

  const std::string& name(Symbol s) const;
  // Returns -1 when unknown.
  Symbol find(std::string_view name) const;
  const std::vector<std::string>& label_names() const { return names_; }

  bool operator==(const Vocab&) const = default;

 private:
  std::vector<std::string> names_;
};

// Blank-augmented alignment α_1..α_U with the frame and label counts it
// is meant to cover.
struct AlignmentPath {
  Topology kind = Topology::kRna;
  std::vector<Symbol> symbols;
  int frames = 0;
  int labels = 0;

  bool operator==(const AlignmentPath&) const = default;
};

int delta_t(Topology kind, Symbol symbol);
// prev is the blank sentinel for the first step.
int delta_n(Topology kind, Symbol symbol, Symbol prev);

LabelSequence collapse(Topology kind, const std::vector<Symbol>& symbols);
inline LabelSequence collapse(const AlignmentPath& path) {
  return collapse(path.kind, path.symbols);
}

int path_length(Topology kind, int frames, int labels);

// CTC needs one extra frame for every pair of equal adjacent labels.
int min_frames(Topology kind, const LabelSequence& y);
inline bool is_reachable(Topology kind, int frames, const LabelSequence& y) {
  return frames >= 1 && frames >= min_frames(kind, y);
}

// Frames consumed when replaying Δt over the symbols.
int replay_frames(Topology kind, const std::vector<Symbol>& symbols);

bool is_valid_path(Topology kind, const std::vector<Symbol>& symbols,
                   int frames, const LabelSequence& y);
inline bool is_valid_path(const AlignmentPath& path, const LabelSequence& y) {
  return is_valid_path(path.kind, path.symbols, path.frames, y);
}

// Per-step lattice node (t, n) visited before consuming each symbol, n being
// the 0-based emitted-label count.
struct NodeIndex {
  int t = 0;
  int n = 0;
  bool operator==(const NodeIndex&) const = default;
};
std::vector<NodeIndex> replay_nodes(Topology kind,
                                    const std::vector<Symbol>& symbols);

// Last-emit step u' for every step u (0-based): the first step whose emitted
// count equals that of u.
std::vector<int> last_emit_steps(Topology kind,
                                 const std::vector<Symbol>& symbols);

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

// Brute force over all |Σ'|^U strings, keeping the valid ones. Test oracle.
// Throws CapExceededError when |Σ'|^U > cap.
std::vector<AlignmentPath> enumerate_paths(
    Topology kind, int frames, const LabelSequence& y, const Vocab& vocab,
    std::uint64_t cap = kDefaultEnumerationCap);

// Symbol order used for deterministic tie-breaking: labels ascending, then
// blank. Smaller rank is preferred.
inline int tie_rank(Symbol s) { return s == kBlank ? 1 << 30 : s; }

}  // namespace ltx

#endif  // LTX_TOPOLOGY_HPP
