#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cona/losses.hpp"

namespace cona {

/// The four encoders of a dual-encoder distillation setup. The numeric
/// values double as gradient slots in `ConaLoss::grads`.
enum class Role : std::size_t {
  TextStudent = 0,
  ImageStudent = 1,
  TextTeacher = 2,
  ImageTeacher = 3,
};

inline constexpr std::size_t kNumRoles = 4;

bool is_teacher(Role role) noexcept;
std::string_view to_string(Role role);

enum class LearningType { IntraStuStu, InterStuStu, IntraTchStu, InterTchStu };
enum class Strategy { InfoNCE, FD, SD, KLDiv, SymSD, SymKLDiv };

inline constexpr LearningType kAllLearningTypes[] = {
    LearningType::IntraStuStu, LearningType::InterStuStu,
    LearningType::IntraTchStu, LearningType::InterTchStu};
inline constexpr Strategy kAllStrategies[] = {
    Strategy::InfoNCE, Strategy::FD,    Strategy::SD,
    Strategy::KLDiv,   Strategy::SymSD, Strategy::SymKLDiv};

std::string_view to_string(LearningType lt);
std::string_view to_string(Strategy s);
/// Long-form row label, e.g. "intra-modal stu-stu learning".
std::string_view group_label(LearningType lt);
std::optional<LearningType> parse_learning_type(std::string_view name);
std::optional<Strategy> parse_strategy(std::string_view name);

/// The primitive loss evaluated by one summand of a term.
enum class LossKind { InfoNCE, FD, SD, KLDiv };

struct ArgSlot {
  Role role;
  bool detached;

  friend bool operator==(const ArgSlot&, const ArgSlot&) = default;
};

/// One loss evaluation. InfoNCE and FD take two slots; SD and KL-Div take
/// (pred_a, pred_b, tgt_a, tgt_b).
struct Summand {
  LossKind kind;
  std::vector<ArgSlot> slots;

  friend bool operator==(const Summand&, const Summand&) = default;
};

/// One cell of the learning-type × strategy grid. Cells written as a sum of
/// two losses carry two summands.
struct LossTerm {
  LearningType learning_type;
  Strategy strategy;
  double weight = 1.0;
  std::vector<Summand> summands;
};

struct Cell {
  LearningType learning_type;
  Strategy strategy;

  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

std::string to_string(const Cell& cell);
/// Parses "IntraTchStu:SymSD".
std::optional<Cell> parse_cell(std::string_view text);

struct TermOptions {
  /// When false, student slots on the target side of SD/KL summands are
  /// stop-gradient. Teacher slots are always detached.
  bool two_sided_targets = false;
};

/// The 20 meaningful cells, in grid order.
std::vector<Cell> valid_cells();
bool is_valid_cell(LearningType lt, Strategy s) noexcept;

/// Throws MeaninglessCombination for the four excluded cells.
LossTerm build_term(LearningType lt, Strategy s, TermOptions options = {});

struct ConaConfig {
  std::vector<LossTerm> terms;
  double tau = kDefaultTemperature;
  bool deterministic = true;
  bool two_sided_targets = false;
  KlDirection kl_direction = KlDirection::Forward;

  /// Appends build_term(lt, s) honouring two_sided_targets.
  ConaConfig& add(LearningType lt, Strategy s, double weight = 1.0);
};

/// Throws BadConfig when the config has no terms, non-finite weights or a
/// bad temperature.
void validate(const ConaConfig& config);

/// Total loss plus gradients indexed by Role. Only attached student inputs
/// receive a gradient entry (zero-filled when no term touches them).
struct ConaLoss : LossValue {
  std::vector<double> term_values;  // unweighted, one per config term
};

ConaLoss evaluate(const ConaConfig& config, const EmbeddingBatch& f_t_stu,
                  const EmbeddingBatch& f_i_stu, const EmbeddingBatch& f_t_tch,
                  const EmbeddingBatch& f_i_tch);

/// Loss of one summand on role-indexed inputs, without gradients.
double evaluate_summand(const Summand& summand,
                        const std::vector<const EmbeddingBatch*>& by_role,
                        double tau, KlDirection direction);

/// "clip", "motis" or "conaclip". Throws UnknownRecipe.
ConaConfig recipe(std::string_view name);

nlohmann::json to_json(const ConaConfig& config);
/// Rejects unknown keys (BadConfig) and meaningless cells
/// (MeaninglessCombination).
ConaConfig config_from_json(const nlohmann::json& doc);
/// Parses a JSON array of term objects, as accepted by `distill --terms`.
std::vector<std::pair<Cell, double>> terms_from_json(const nlohmann::json& doc);

}  // namespace cona
