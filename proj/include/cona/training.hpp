#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "cona/encoder.hpp"
#include "cona/graph.hpp"
#include "cona/retrieval.hpp"

namespace cona {

// ---------------------------------------------------------------------------
// Synthetic paired data

/// Row i of text_inputs and row i of image_inputs are a positive pair.
struct SyntheticDataset {
  Matrix text_inputs;
  Matrix image_inputs;
  std::size_t latent_dim = 0;
  double noise = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return text_inputs.rows(); }
};

struct GenerateOptions {
  std::size_t pairs = 10000;
  std::size_t latent_dim = 16;
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::size_t text_dim = 48;
  std::size_t image_dim = 64;
  /// Use identity modality maps (requires text_dim == image_dim == latent).
  bool identity_maps = false;
};

/// text = A_T z + noise·ε, image = A_I z + noise·ε' with z ~ N(0, I) and
/// fixed Gaussian maps A_T, A_I (entries N(0, 1/latent)).
SyntheticDataset generate_pairs(const GenerateOptions& options);

/// Container kind "dataset"; blocks "text" and "image".
void save_dataset(const std::filesystem::path& path, const SyntheticDataset& ds);
SyntheticDataset load_dataset(const std::filesystem::path& path);

struct DatasetSplit {
  SyntheticDataset train;
  SyntheticDataset validation;
};

/// The last `fraction` of pairs (rounded down) is held out.
DatasetSplit split_dataset(const SyntheticDataset& ds, double fraction = 0.1);

// ---------------------------------------------------------------------------
// Schedule and optimizer

struct ScheduleSpec {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
};

/// Linear warmup to peak_lr, then half-cosine decay to zero at total_steps.
/// Throws StepOutOfRange.
double lr_at(const ScheduleSpec& schedule, std::size_t step);

struct OptimizerState {
  std::size_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct ParamBlock {
  Matrix* value;
  const Matrix* grad;
  bool frozen = false;
};

/// One decoupled-weight-decay Adam update. Moments are allocated on the
/// first call; frozen blocks are left untouched.
void adamw_step(std::span<const ParamBlock> params, OptimizerState& state,
                double lr);

// ---------------------------------------------------------------------------
// Retrieval evaluation

struct BidirectionalRecall {
  RecallReport text_to_image;
  RecallReport image_to_text;
};

BidirectionalRecall evaluate_retrieval(const Encoder& text_encoder,
                                       const Encoder& image_encoder,
                                       const SyntheticDataset& data,
                                       const std::vector<std::size_t>& ks = kDefaultRecallKs);

nlohmann::json to_json(const RecallReport& report);
nlohmann::json to_json(const BidirectionalRecall& recall);

// ---------------------------------------------------------------------------
// Training loops

using MetricsSink = std::function<void(const nlohmann::json&)>;

struct OptimConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 256;
  double peak_lr = 3e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Steps per epoch (the last batch may be short) times epochs.
std::size_t total_steps(std::size_t train_size, const OptimConfig& optim);
ScheduleSpec make_schedule(std::size_t train_size, const OptimConfig& optim);

struct TeacherConfig {
  EncoderSpec text_spec;
  EncoderSpec image_spec;
  OptimConfig optim{.epochs = 10, .peak_lr = 1e-3};
  double tau = kDefaultTemperature;
  std::uint64_t seed = 0;
  bool deterministic = true;
};

/// Fresh seeded teacher encoders for both modalities (unfrozen).
DualEncoderBundle init_teachers(const TeacherConfig& config);

/// Trains both teachers with the two-way InfoNCE objective, then freezes
/// them. Logs one record per step.
void pretrain_teacher(DualEncoderBundle& bundle, const SyntheticDataset& train,
                      const TeacherConfig& config, const MetricsSink& sink = {});

enum class StudentInit { FromTeacher, Random };

struct StudentConfig {
  std::size_t text_layers = 2;
  std::size_t image_layers = 2;
  StudentInit text_init = StudentInit::FromTeacher;
  StudentInit image_init = StudentInit::FromTeacher;
};

/// Adds student encoders, initialised from the first layers of the matching
/// teacher or at random (seeded), with the teacher's widths.
void init_students(DualEncoderBundle& bundle, const StudentConfig& config,
                   std::uint64_t seed);

enum class PartStrategy { FD, SD };

struct DistillConfig {
  ConaConfig cona;
  OptimConfig optim;
  std::uint64_t seed = 0;
  /// Intermediate-part distillation: 0 disables it, otherwise the number of
  /// parts each encoder is divided into.
  std::size_t intermediate_parts = 0;
  PartStrategy part_strategy = PartStrategy::FD;
  std::vector<std::size_t> ks = kDefaultRecallKs;
};

struct DistillResult {
  std::size_t steps = 0;
  std::optional<BidirectionalRecall> final_recall;
};

/// Frozen-teacher distillation of the bundle's students. `validation` may be
/// empty, in which case no recall is logged.
DistillResult distill(DualEncoderBundle& bundle, const SyntheticDataset& train,
                      const SyntheticDataset& validation,
                      const DistillConfig& config, const MetricsSink& sink = {});

}  // namespace cona
