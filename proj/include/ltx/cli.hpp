#ifndef LTX_CLI_HPP
#define LTX_CLI_HPP

#include "ltx/config.hpp"
#include "ltx/dataio.hpp"
#include "ltx/decoder.hpp"
#include "ltx/gradcheck.hpp"
#include "ltx/training.hpp"

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ltx::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitNumeric = 3;

int exit_code(const std::exception& e);

// Runs one command line (arguments after the program name) and returns the
// exit code. Errors are reported on err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// --- experiment configuration ------------------------------------------------

struct DataSplits {
  SyntheticTaskConfig task;
  int train = 2000;
  int dev = 200;
  int test = 200;
};

// "data." section.
DataSplits data_config(const ConfigMap& cfg);

// "model." section. input_dim and num_labels default to the data section.
ModelConfig model_config(const ConfigMap& cfg);

struct DecodeConfig {
  int beam_size = kDefaultBeamSize;
  MergeMode merge = MergeMode::kNone;
  double ratio_cap = kDefaultRatioCap;
  std::optional<std::filesystem::path> merges;
};

// "decode." section.
DecodeConfig decode_config(const ConfigMap& cfg);

// --- commands ----------------------------------------------------------------------

// Writes train, dev and test splits with their ground-truth alignments.
void gen_data(const ConfigMap& cfg, const std::filesystem::path& out_dir);

struct TrainOptions {
  std::filesystem::path data_dir;
  std::filesystem::path out_checkpoint;
  // Replaces the ground-truth alignments of the training split.
  std::optional<std::filesystem::path> alignments;
  std::optional<std::filesystem::path> import_checkpoint;
  std::vector<std::string> import_prefixes;
};

struct TrainReport {
  std::vector<EpochMetrics> metrics;
  ImportReport imported;
};

TrainReport train_command(const ConfigMap& cfg, const TrainOptions& options, std::ostream& log);

struct AlignOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::string split = "train";
  std::filesystem::path out;
  bool prior = false;
  double prior_scale = 1.0;
};

AlignResult align_command(const AlignOptions& options, std::ostream& log);

struct DecodeOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::string split = "test";
  std::filesystem::path out;
  DecodeConfig decode;
};

struct DecodeReport {
  std::vector<TranscriptLine> lines;
  double mean_log_score = 0.0;
};

DecodeReport decode_corpus(const TransducerModel& model, const Corpus& corpus, const DecodeConfig& decode);
DecodeReport decode_command(const DecodeOptions& options, std::ostream& log);

ScoreReport score_command(const std::filesystem::path& refs, const std::filesystem::path& hyps,
                          std::ostream& out);

struct ConcatRow {
  int group = 1;
  std::size_t sequences = 0;
  double mean_frames = 0.0;
  int min_frames = 0;
  int max_frames = 0;
  double error_rate = 0.0;
};

std::vector<ConcatRow> concat_eval(const TransducerModel& model, const Corpus& corpus,
                                   const std::vector<int>& groups, const DecodeConfig& decode);
void write_concat_report(std::ostream& out, const std::vector<ConcatRow>& rows);

}  // namespace ltx::cli

#endif  // LTX_CLI_HPP
