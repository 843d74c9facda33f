#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ennshift/ensemble.hpp"
#include "ennshift/shiftbench.hpp"
#include "ennshift/training.hpp"
#include "json.hpp"

namespace ennshift {

// On-disk layout:
//   "ENN1" | u32 LE metadata length | JSON metadata | payload
// payload = u32 count, then per tensor:
//   u32 name length | name | u32 ndim | u32 dims[ndim] | f32 LE data
// metadata["digest"] is the lowercase hex SHA-256 of the payload bytes.
inline constexpr char kCheckpointMagic[4] = {'E', 'N', 'N', '1'};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const;
};

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

std::vector<unsigned char> encode_payload(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_payload(std::span<const unsigned char> payload);

// Writes the checkpoint, filling metadata["digest"]; returns the digest.
std::string write_checkpoint(const std::filesystem::path& path, Checkpoint checkpoint);
// Throws FormatError on a malformed header, DigestError when the payload is
// truncated or does not hash to the recorded digest.
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Metadata only; the payload is not hashed.
nlohmann::json read_checkpoint_metadata(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EpinetConfig& config);
EpinetConfig epinet_config_from_json(const nlohmann::json& j);
nlohmann::json network_architecture(const Network& net);
Network network_from_architecture(const nlohmann::json& arch);

// Model checkpoints. `extra` is merged into the metadata (seeds, lineage).
std::string save_checkpoint(const BaseNet& model, const std::filesystem::path& path,
                            const TrainConfig& config,
                            const nlohmann::json& extra = nlohmann::json::object());
std::string save_checkpoint(const EpinetModel& model, const std::filesystem::path& path,
                            const TrainConfig& config,
                            const nlohmann::json& extra = nlohmann::json::object());
std::string save_checkpoint(const EnsembleModel& model, const std::filesystem::path& path,
                            const TrainConfig& config,
                            const nlohmann::json& extra = nlohmann::json::object());

std::shared_ptr<BaseNet> load_base(const std::filesystem::path& path);
std::shared_ptr<EpinetModel> load_epinet(const std::filesystem::path& path);
std::shared_ptr<EnsembleModel> load_ensemble(const std::filesystem::path& path);
// Dispatches on metadata["kind"].
std::shared_ptr<EnnModel> load_model(const std::filesystem::path& path);

std::string save_dataset(const ImageDataset& data, const std::filesystem::path& path);
ImageDataset load_dataset(const std::filesystem::path& path);

// --- reports -----------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::size_t model_size_params = 0;
  std::string dataset;
  std::string corruption_type;
  int severity = 0;
  std::string metric;
  double value = 0.0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kReportHeader =
    "model,model_size_params,dataset,corruption_type,severity,metric,value,temperature,seed";

struct MetricsReport {
  // experiment name -> rows; one CSV per experiment.
  std::map<std::string, std::vector<ReportRow>> experiments;
  std::vector<std::string> notes;
};

std::string format_value(double v);
std::string report_csv(const std::vector<ReportRow>& rows);
// Writes <experiment>.csv for every experiment (or a header-only
// metrics.csv when there are none) and summary.txt. Returns written paths.
std::vector<std::filesystem::path> write_report(const MetricsReport& report,
                                                const std::filesystem::path& dir);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ennshift
