#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "lsdr/core.hpp"
#include "lsdr/estimate.hpp"
#include "lsdr/mc.hpp"
#include "lsdr/model.hpp"
#include "lsdr/synth.hpp"
#include "lsdr/train.hpp"

namespace lsdr::io {

using json = nlohmann::json;

inline constexpr const char* kDatasetFormat = "lsdr-dataset/1";
inline constexpr const char* kCheckpointFormat = "lsdr-checkpoint/1";
inline constexpr const char* kEstimateFormat = "lsdr-estimate/1";
inline constexpr const char* kMcFormat = "lsdr-montecarlo/1";
inline constexpr const char* kEvalFormat = "lsdr-eval/1";

/// Malformed or unreadable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

json to_json(const Vector& v);
Vector vector_from_json(const json& j);
json to_json(const ClassDistribution& p);
ClassDistribution distribution_from_json(const json& j);
json to_json(const MissingnessMechanism& m);
MissingnessMechanism mechanism_from_json(const json& j);

json to_json(const synth::MixtureSpec& m);
synth::MixtureSpec mixture_from_json(const json& j);
json to_json(const synth::ShiftConfig& s);
synth::ShiftConfig shift_from_json(const json& j);
json to_json(const synth::PriorTruth& p);
synth::PriorTruth priors_from_json(const json& j);

json to_json(const model::TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
model::TrainConfig train_config_from_json(const json& j);
json to_json(const model::ClassifierParams& p);
model::ClassifierParams classifier_from_json(const json& j);

json to_json(const train::EpochRecord& r);
json to_json(const train::TrainedModel& m);
train::TrainedModel trained_model_from_json(const json& j);

json to_json(const estimate::EstimateReport& r);

json to_json(const mc::McScenario& s);
json to_json(const mc::McReport& r, bool include_replications = false);
json to_json(const mc::BiasDecayResult& r);

// ---------------------------------------------------------------------------
// Files

struct DatasetFile {
  Dataset data;
  /// Present when the header carries generation metadata.
  std::optional<synth::GroundTruth> truth;
};

/// JSON-lines: a header object then one row per line.
/// `config` is embedded in the header under "config" when not null.
void write_dataset(const std::filesystem::path& path, const Dataset& data,
                   const std::optional<synth::GroundTruth>& truth, const json& config = nullptr);
DatasetFile read_dataset(const std::filesystem::path& path);

/// Single JSON document with a trailing newline; creates parent directories.
void write_json(const std::filesystem::path& path, const json& document);
json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// {"format": kCheckpointFormat, "config": config, "model": ...}.
json checkpoint(const train::TrainedModel& model, const json& config);
train::TrainedModel model_from_checkpoint(const json& document);

}  // namespace lsdr::io
