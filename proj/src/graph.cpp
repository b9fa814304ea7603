#include "cona/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cona/error.hpp"

namespace cona {

namespace {

using enum Role;
constexpr Role Ts = TextStudent;
constexpr Role Is = ImageStudent;
constexpr Role Tt = TextTeacher;
constexpr Role It = ImageTeacher;

Summand pair_summand(LossKind kind, Role a, Role b) {
  return {kind, {{a, is_teacher(a)}, {b, is_teacher(b)}}};
}

Summand target_summand(LossKind kind, Role pa, Role pb, Role ta, Role tb,
                       const TermOptions& opt) {
  auto target = [&](Role r) {
    return ArgSlot{r, is_teacher(r) || !opt.two_sided_targets};
  };
  return {kind,
          {{pa, is_teacher(pa)}, {pb, is_teacher(pb)}, target(ta), target(tb)}};
}

std::vector<Summand> wiring(LearningType lt, Strategy s,
                            const TermOptions& o) {
  using LT = LearningType;
  using S = Strategy;
  auto nce = [](Role a, Role b) { return pair_summand(LossKind::InfoNCE, a, b); };
  auto fd = [](Role a, Role b) { return pair_summand(LossKind::FD, a, b); };
  auto sd = [&](Role pa, Role pb, Role ta, Role tb) {
    return target_summand(LossKind::SD, pa, pb, ta, tb, o);
  };
  auto kl = [&](Role pa, Role pb, Role ta, Role tb) {
    return target_summand(LossKind::KLDiv, pa, pb, ta, tb, o);
  };

  switch (lt) {
    case LT::IntraStuStu:
      switch (s) {
        case S::SD: return {sd(Ts, Ts, Tt, Tt), sd(Is, Is, It, It)};
        case S::KLDiv: return {kl(Ts, Ts, Tt, Tt), kl(Is, Is, It, It)};
        case S::SymSD: return {sd(Ts, Ts, Is, Is)};
        case S::SymKLDiv: return {kl(Ts, Ts, Is, Is), kl(Is, Is, Ts, Ts)};
        default: break;
      }
      break;
    case LT::InterStuStu:
      switch (s) {
        case S::InfoNCE: return {nce(Ts, Is), nce(Is, Ts)};
        case S::FD: return {fd(Ts, Is)};
        case S::SD: return {sd(Ts, Is, Tt, It), sd(Is, Ts, It, Tt)};
        case S::KLDiv: return {kl(Ts, Is, Tt, It), kl(Is, Ts, It, Tt)};
        default: break;
      }
      break;
    case LT::IntraTchStu:
      switch (s) {
        case S::InfoNCE: return {nce(Ts, Tt), nce(Is, It)};
        case S::FD: return {fd(Ts, Tt), fd(Is, It)};
        case S::SD: return {sd(Ts, Tt, Tt, Tt), sd(Is, It, It, It)};
        case S::KLDiv: return {kl(Ts, Tt, Tt, Tt), kl(Is, It, It, It)};
        case S::SymSD: return {sd(Ts, Tt, Is, It)};
        case S::SymKLDiv: return {kl(Ts, Tt, Is, It), kl(Is, It, Ts, Tt)};
      }
      break;
    case LT::InterTchStu:
      switch (s) {
        case S::InfoNCE: return {nce(Ts, It), nce(Is, Tt)};
        case S::FD: return {fd(Ts, It), fd(Is, Tt)};
        case S::SD: return {sd(Ts, It, Tt, It), sd(Is, Tt, It, Tt)};
        case S::KLDiv: return {kl(Ts, It, Tt, It), kl(Is, Tt, It, Tt)};
        case S::SymSD: return {sd(Ts, It, Is, Tt)};
        case S::SymKLDiv: return {kl(Ts, It, Is, Tt), kl(Is, Tt, Ts, It)};
      }
      break;
  }
  return {};
}

LossValue run_summand(const Summand& summand,
                      const std::vector<const EmbeddingBatch*>& by_role,
                      double tau, KlDirection direction) {
  std::vector<EmbeddingBatch> args;
  args.reserve(summand.slots.size());
  for (const ArgSlot& slot : summand.slots) {
    const EmbeddingBatch& src = *by_role[static_cast<std::size_t>(slot.role)];
    args.push_back(slot.detached || src.detached() ? src.as_detached()
                                                   : src.as_attached());
  }
  switch (summand.kind) {
    case LossKind::InfoNCE: return infonce(args[0], args[1], tau);
    case LossKind::FD: return feature_distance(args[0], args[1]);
    case LossKind::SD:
      return similarity_distance(args[0], args[1], args[2], args[3]);
    case LossKind::KLDiv:
      return kl_div(args[0], args[1], args[2], args[3], tau, direction);
  }
  return {};
}

}  // namespace

bool is_teacher(Role role) noexcept {
  return role == TextTeacher || role == ImageTeacher;
}

std::string_view to_string(Role role) {
  switch (role) {
    case TextStudent: return "text_student";
    case ImageStudent: return "image_student";
    case TextTeacher: return "text_teacher";
    case ImageTeacher: return "image_teacher";
  }
  return "?";
}

std::string_view to_string(LearningType lt) {
  switch (lt) {
    case LearningType::IntraStuStu: return "IntraStuStu";
    case LearningType::InterStuStu: return "InterStuStu";
    case LearningType::IntraTchStu: return "IntraTchStu";
    case LearningType::InterTchStu: return "InterTchStu";
  }
  return "?";
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::InfoNCE: return "InfoNCE";
    case Strategy::FD: return "FD";
    case Strategy::SD: return "SD";
    case Strategy::KLDiv: return "KLDiv";
    case Strategy::SymSD: return "SymSD";
    case Strategy::SymKLDiv: return "SymKLDiv";
  }
  return "?";
}

std::string_view group_label(LearningType lt) {
  switch (lt) {
    case LearningType::IntraStuStu: return "intra-modal stu-stu learning";
    case LearningType::InterStuStu: return "inter-modal stu-stu learning";
    case LearningType::IntraTchStu: return "intra-modal tch-stu learning";
    case LearningType::InterTchStu: return "inter-modal tch-stu learning";
  }
  return "?";
}

std::optional<LearningType> parse_learning_type(std::string_view name) {
  for (LearningType lt : kAllLearningTypes)
    if (to_string(lt) == name) return lt;
  return std::nullopt;
}

std::optional<Strategy> parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies)
    if (to_string(s) == name) return s;
  return std::nullopt;
}

std::string to_string(const Cell& cell) {
  return std::string(to_string(cell.learning_type)) + ":" +
         std::string(to_string(cell.strategy));
}

std::optional<Cell> parse_cell(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) return std::nullopt;
  auto lt = parse_learning_type(text.substr(0, colon));
  auto s = parse_strategy(text.substr(colon + 1));
  if (!lt || !s) return std::nullopt;
  return Cell{*lt, *s};
}

bool is_valid_cell(LearningType lt, Strategy s) noexcept {
  switch (lt) {
    case LearningType::IntraStuStu:
      return s != Strategy::InfoNCE && s != Strategy::FD;
    case LearningType::InterStuStu:
      return s != Strategy::SymSD && s != Strategy::SymKLDiv;
    default:
      return true;
  }
}

std::vector<Cell> valid_cells() {
  std::vector<Cell> cells;
  for (LearningType lt : kAllLearningTypes)
    for (Strategy s : kAllStrategies)
      if (is_valid_cell(lt, s)) cells.push_back({lt, s});
  return cells;
}

LossTerm build_term(LearningType lt, Strategy s, TermOptions options) {
  if (!is_valid_cell(lt, s)) {
    fail(ErrorKind::MeaninglessCombination,
         "meaningless combination " + to_string(Cell{lt, s}));
  }
  return LossTerm{lt, s, 1.0, wiring(lt, s, options)};
}

ConaConfig& ConaConfig::add(LearningType lt, Strategy s, double weight) {
  LossTerm term = build_term(lt, s, {two_sided_targets});
  term.weight = weight;
  terms.push_back(std::move(term));
  return *this;
}

void validate(const ConaConfig& config) {
  if (config.terms.empty()) fail(ErrorKind::BadConfig, "config has no terms");
  for (const LossTerm& t : config.terms) {
    if (!std::isfinite(t.weight) || t.weight < 0.0) {
      fail(ErrorKind::BadConfig, "term weight must be finite and >= 0");
    }
  }
  if (!(config.tau > 0.0) || !std::isfinite(config.tau)) {
    fail(ErrorKind::BadTemperature, "temperature must be positive");
  }
}

double evaluate_summand(const Summand& summand,
                        const std::vector<const EmbeddingBatch*>& by_role,
                        double tau, KlDirection direction) {
  std::vector<const EmbeddingBatch*> detached_view;
  std::vector<EmbeddingBatch> storage;
  storage.reserve(by_role.size());
  for (const EmbeddingBatch* b : by_role) storage.push_back(b->as_detached());
  for (const EmbeddingBatch& b : storage) detached_view.push_back(&b);
  return run_summand(summand, detached_view, tau, direction).value;
}

ConaLoss evaluate(const ConaConfig& config, const EmbeddingBatch& f_t_stu,
                  const EmbeddingBatch& f_i_stu, const EmbeddingBatch& f_t_tch,
                  const EmbeddingBatch& f_i_tch) {
  validate(config);
  const std::vector<const EmbeddingBatch*> by_role = {&f_t_stu, &f_i_stu,
                                                      &f_t_tch, &f_i_tch};
  const std::size_t n = f_t_stu.n();
  for (const EmbeddingBatch* b : by_role) {
    if (b->n() != n) fail(ErrorKind::ShapeMismatch, "evaluate: batch sizes differ");
  }

  ConaLoss out;
  for (std::size_t r = 0; r < 2; ++r) {
    if (!by_role[r]->detached()) {
      out.grads[r] = Matrix(by_role[r]->n(), by_role[r]->d());
    }
  }

  for (const LossTerm& term : config.terms) {
    double term_value = 0.0;
    for (const Summand& summand : term.summands) {
      LossValue lv = run_summand(summand, by_role, config.tau, config.kl_direction);
      term_value += lv.value;
      for (std::size_t s = 0; s < summand.slots.size(); ++s) {
        if (!lv.grads[s]) continue;
        const auto r = static_cast<std::size_t>(summand.slots[s].role);
        if (!out.grads[r]) continue;
        *lv.grads[s] *= term.weight;
        *out.grads[r] += *lv.grads[s];
      }
    }
    out.term_values.push_back(term_value);
    out.value += term.weight * term_value;
  }
  return out;
}

ConaConfig recipe(std::string_view name) {
  ConaConfig config;
  if (name == "clip") {
    // Both InfoNCE directions between the two encoders fed into the student
    // slots; teacher pre-training passes the teachers' own embeddings there.
    config.add(LearningType::InterStuStu, Strategy::InfoNCE);
  } else if (name == "motis") {
    config.add(LearningType::IntraTchStu, Strategy::InfoNCE);
  } else if (name == "conaclip") {
    config.add(LearningType::IntraTchStu, Strategy::InfoNCE)
        .add(LearningType::IntraStuStu, Strategy::SD)
        .add(LearningType::InterStuStu, Strategy::SD)
        .add(LearningType::IntraTchStu, Strategy::SD)
        .add(LearningType::IntraTchStu, Strategy::SymSD)
        .add(LearningType::InterTchStu, Strategy::SymKLDiv);
  } else {
    fail(ErrorKind::UnknownRecipe, "unknown recipe '" + std::string(name) + "'");
  }
  return config;
}

nlohmann::json to_json(const ConaConfig& config) {
  nlohmann::json terms = nlohmann::json::array();
  for (const LossTerm& t : config.terms) {
    terms.push_back({{"learning_type", to_string(t.learning_type)},
                     {"strategy", to_string(t.strategy)},
                     {"weight", t.weight}});
  }
  nlohmann::json doc = {{"terms", terms},
                        {"tau", config.tau},
                        {"deterministic", config.deterministic}};
  if (config.two_sided_targets) doc["two_sided_targets"] = true;
  if (config.kl_direction == KlDirection::Reverse) doc["kl_direction"] = "reverse";
  return doc;
}

namespace {

void reject_unknown_keys(const nlohmann::json& obj,
                         const std::set<std::string>& allowed,
                         const char* where) {
  if (!obj.is_object()) {
    fail(ErrorKind::BadConfig, std::string(where) + " must be a JSON object");
  }
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.contains(key)) {
      fail(ErrorKind::BadConfig,
           std::string("unknown key '") + key + "' in " + where);
    }
  }
}

}  // namespace

std::vector<std::pair<Cell, double>> terms_from_json(const nlohmann::json& doc) {
  if (!doc.is_array()) fail(ErrorKind::BadConfig, "terms must be a JSON array");
  std::vector<std::pair<Cell, double>> out;
  for (const auto& item : doc) {
    reject_unknown_keys(item, {"learning_type", "strategy", "weight"}, "term");
    if (!item.contains("learning_type") || !item.contains("strategy") ||
        !item["learning_type"].is_string() || !item["strategy"].is_string()) {
      fail(ErrorKind::BadConfig, "term needs string learning_type and strategy");
    }
    const auto lt_name = item["learning_type"].get<std::string>();
    const auto s_name = item["strategy"].get<std::string>();
    auto lt = parse_learning_type(lt_name);
    auto s = parse_strategy(s_name);
    if (!lt) fail(ErrorKind::BadConfig, "unknown learning_type '" + lt_name + "'");
    if (!s) fail(ErrorKind::BadConfig, "unknown strategy '" + s_name + "'");
    if (!is_valid_cell(*lt, *s)) {
      fail(ErrorKind::MeaninglessCombination,
           "meaningless combination " + to_string(Cell{*lt, *s}));
    }
    double weight = 1.0;
    if (item.contains("weight")) {
      if (!item["weight"].is_number()) fail(ErrorKind::BadConfig, "weight must be a number");
      weight = item["weight"].get<double>();
    }
    out.emplace_back(Cell{*lt, *s}, weight);
  }
  return out;
}

ConaConfig config_from_json(const nlohmann::json& doc) {
  reject_unknown_keys(doc,
                      {"terms", "tau", "deterministic", "two_sided_targets",
                       "kl_direction"},
                      "cona config");
  ConaConfig config;
  if (doc.contains("tau")) {
    if (!doc["tau"].is_number()) fail(ErrorKind::BadConfig, "tau must be a number");
    config.tau = doc["tau"].get<double>();
  }
  if (doc.contains("deterministic")) {
    if (!doc["deterministic"].is_boolean()) fail(ErrorKind::BadConfig, "deterministic must be a boolean");
    config.deterministic = doc["deterministic"].get<bool>();
  }
  if (doc.contains("two_sided_targets")) {
    if (!doc["two_sided_targets"].is_boolean()) fail(ErrorKind::BadConfig, "two_sided_targets must be a boolean");
    config.two_sided_targets = doc["two_sided_targets"].get<bool>();
  }
  if (doc.contains("kl_direction")) {
    const auto dir = doc["kl_direction"];
    if (dir == "forward") config.kl_direction = KlDirection::Forward;
    else if (dir == "reverse") config.kl_direction = KlDirection::Reverse;
    else fail(ErrorKind::BadConfig, "kl_direction must be 'forward' or 'reverse'");
  }
  if (!doc.contains("terms")) fail(ErrorKind::BadConfig, "cona config needs terms");
  for (const auto& [cell, weight] : terms_from_json(doc["terms"])) {
    config.add(cell.learning_type, cell.strategy, weight);
  }
  validate(config);
  return config;
}

}  // namespace cona
