#include "cona/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cona/error.hpp"
#include "cona/graph.hpp"
#include "cona/io.hpp"
#include "cona/retrieval.hpp"
#include "cona/training.hpp"

namespace cona::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::BadFlag:
    case ErrorKind::BadConfig:
    case ErrorKind::MeaninglessCombination:
    case ErrorKind::UnknownRecipe:
    case ErrorKind::BadParts:
    case ErrorKind::BadTemperature:
    case ErrorKind::StepOutOfRange:
      return kFlagError;
    case ErrorKind::ZeroRow:
    case ErrorKind::NonFiniteValue:
    case ErrorKind::NotNormalized:
      return kNumericError;
    default:
      return kDataError;
  }
}

void print_error(std::ostream& err, std::string_view kind, int code,
                 const std::string& message) {
  err << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump()
      << "\n";
}

// ---------------------------------------------------------------------------
// --config merging: keys of the JSON object become flags placed ahead of the
// user's own arguments, skipping any flag the user already passed.

bool flag_present(const std::vector<std::string>& args, const std::string& flag) {
  return std::ranges::any_of(args, [&](const std::string& a) {
    return a == flag || a.starts_with(flag + "=");
  });
}

std::string scalar_to_arg(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) {
    std::ostringstream os;
    os << std::setprecision(17) << v.get<double>();
    return os.str();
  }
  return v.dump();
}

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].starts_with("--config=")) path = args[i].substr(9);
  }
  if (!path || args.empty()) return args;

  json doc;
  try {
    std::ifstream in(*path);
    if (!in) fail(ErrorKind::IoError, "cannot open config " + *path);
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::BadFlag, std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(ErrorKind::BadFlag, "config must be a JSON object");

  std::vector<std::string> extra;
  for (const auto& [key, value] : doc.items()) {
    const std::string flag = "--" + key;
    if (flag_present(args, flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) {
        if (!joined.empty()) joined += ",";
        joined += scalar_to_arg(v);
      }
      extra.push_back(flag + "=" + joined);
    } else if (value.is_object()) {
      extra.push_back(flag + "=" + value.dump());
    } else {
      extra.push_back(flag + "=" + scalar_to_arg(value));
    }
  }
  std::vector<std::string> out{args.front()};
  out.insert(out.end(), extra.begin(), extra.end());
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

// ---------------------------------------------------------------------------

struct Common {
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  bool deterministic = false;
  std::string config;

  void attach(CLI::App* app) {
    seed_opt = app->add_option("--seed", seed, "Seed for all randomness");
    app->add_flag("--deterministic", deterministic,
                  "Serial kernels and a mandatory --seed");
    app->add_option("--config", config,
                    "JSON object of flag values (explicit flags win)");
  }

  std::uint64_t resolve_seed() {
    if (seed_opt->count() > 0) return seed;
    if (deterministic) fail(ErrorKind::BadFlag, "--seed is required with --deterministic");
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) | rd();
    return seed;
  }
};

// Numbers stay numbers in the manifest; everything else is kept as text.
json typed(const std::string& text) {
  if (text.empty()) return text;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (*end == '\0' && std::isfinite(v)) {
    const json parsed = json::parse(text, nullptr, false);
    return parsed.is_number() ? parsed : json(v);
  }
  return text;
}

json resolved_flags(const CLI::App* app) {
  json out = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    if (opt->get_expected_max() == 0) {
      out[name] = opt->count() > 0;
      continue;
    }
    const auto& results = opt->results();
    if (!results.empty()) {
      out[name] = results.size() == 1 ? typed(results.front()) : json(results);
    } else if (!opt->get_default_str().empty()) {
      out[name] = typed(opt->get_default_str());
    }
  }
  return out;
}

class Manifest {
 public:
  explicit Manifest(std::string command)
      : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  void write(const fs::path& path, const CLI::App* app, std::uint64_t seed,
             const json& artifacts, const json& extra = json::object()) const {
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json doc = {{"command", command_},
                {"config", resolved_flags(app)},
                {"seed", seed},
                {"artifacts", artifacts},
                {"wall_clock_seconds", seconds},
                {"tool_version", kToolVersion}};
    doc.update(extra);
    io::write_text_atomic(path, doc.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point start_;
};

fs::path manifest_path(const fs::path& primary) {
  fs::path p = primary;
  p += ".manifest.json";
  return p;
}

fs::path metrics_path(const std::string& flag, const fs::path& primary) {
  if (!flag.empty()) return flag;
  fs::path p = primary;
  p += ".metrics.jsonl";
  return p;
}

class MetricsLog {
 public:
  MetricsSink sink() {
    return [this](const json& rec) { text_ += rec.dump() + "\n"; };
  }
  void write(const fs::path& path) const { io::write_text_atomic(path, text_); }

 private:
  std::string text_;
};

template <typename T>
void require_positive(const T& v, const char* flag) {
  if (!(v > 0)) fail(ErrorKind::BadFlag, std::string(flag) + " must be > 0");
}

// ---------------------------------------------------------------------------
// Flags shared by distill and ablate

// "LearningType:Strategy,..." with every cell checked against the grid.
std::vector<Cell> parse_cell_list(const std::string& text, const std::string& flag) {
  std::vector<Cell> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto cell = parse_cell(item);
    if (!cell) fail(ErrorKind::BadFlag, "bad cell '" + item + "' in " + flag);
    if (!is_valid_cell(cell->learning_type, cell->strategy)) {
      fail(ErrorKind::MeaninglessCombination, "meaningless combination " + item);
    }
    out.push_back(*cell);
  }
  if (out.empty()) fail(ErrorKind::BadFlag, flag + " selects nothing");
  return out;
}

struct DistillFlags {
  std::string data;
  std::string teacher;
  std::string recipe_name = "motis";
  std::string terms;
  std::size_t student_layers = 2;
  std::size_t image_student_layers = 0;
  std::string text_init = "teacher";
  std::string image_init = "teacher";
  std::size_t epochs = 5;
  std::size_t batch = 256;
  double lr = 3e-4;
  double warmup = 0.05;
  double weight_decay = 0.1;
  double tau = kDefaultTemperature;
  bool two_sided = false;
  std::string kl_direction = "forward";
  std::size_t parts = 0;
  std::string part_strategy = "FD";
  double val_fraction = 0.1;

  void attach(CLI::App* app, bool with_recipe) {
    app->add_option("--data", data, "Dataset file")->required();
    app->add_option("--teacher", teacher, "Teacher checkpoint")->required();
    if (with_recipe) {
      app->add_option("--recipe", recipe_name, "motis | conaclip");
      app->add_option("--terms", terms,
                      "Cells as LearningType:Strategy,... or a JSON array of\n"
                      "{learning_type, strategy, weight} (overrides --recipe)");
    }
    app->add_option("--student-layers", student_layers, "Text student layers");
    app->add_option("--image-student-layers", image_student_layers,
                    "Image student layers (default: --student-layers)");
    app->add_option("--text-init", text_init, "teacher | random");
    app->add_option("--image-init", image_init, "teacher | random");
    app->add_option("--epochs", epochs);
    app->add_option("--batch", batch);
    app->add_option("--lr", lr, "Peak learning rate");
    app->add_option("--warmup", warmup, "Warmup fraction of total steps");
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--tau", tau, "Softmax temperature");
    app->add_flag("--two-sided", two_sided,
                  "Let gradients flow into student target slots");
    app->add_option("--kl-direction", kl_direction, "forward | reverse");
    app->add_option("--parts", parts,
                    "Intermediate-part distillation: number of parts (0 = off)");
    app->add_option("--part-strategy", part_strategy, "FD | SD");
    app->add_option("--val-fraction", val_fraction, "Held-out fraction");
  }

  StudentInit parse_init(const std::string& v, const char* flag) const {
    if (v == "teacher") return StudentInit::FromTeacher;
    if (v == "random") return StudentInit::Random;
    fail(ErrorKind::BadFlag, std::string(flag) + " must be 'teacher' or 'random'");
  }

  StudentConfig students() const {
    require_positive(student_layers, "--student-layers");
    return {student_layers, image_student_layers ? image_student_layers : student_layers,
            parse_init(text_init, "--text-init"), parse_init(image_init, "--image-init")};
  }

  /// The term list: --terms when given, else --recipe.
  ConaConfig cona(bool deterministic) const {
    ConaConfig c;
    c.tau = tau;
    c.deterministic = deterministic;
    c.two_sided_targets = two_sided;
    if (kl_direction == "forward") c.kl_direction = KlDirection::Forward;
    else if (kl_direction == "reverse") c.kl_direction = KlDirection::Reverse;
    else fail(ErrorKind::BadFlag, "--kl-direction must be 'forward' or 'reverse'");

    if (!terms.empty() && terms.front() != '[') {
      for (const Cell& cell : parse_cell_list(terms, "--terms")) {
        c.add(cell.learning_type, cell.strategy);
      }
    } else if (!terms.empty()) {
      json doc;
      try {
        doc = json::parse(terms);
      } catch (const json::parse_error& e) {
        fail(ErrorKind::BadFlag, std::string("--terms is not valid JSON: ") + e.what());
      }
      for (const auto& [cell, weight] : terms_from_json(doc)) {
        c.add(cell.learning_type, cell.strategy, weight);
      }
    } else {
      if (recipe_name != "motis" && recipe_name != "conaclip") {
        fail(ErrorKind::UnknownRecipe, "--recipe must be motis or conaclip, got '" +
                                           recipe_name + "'");
      }
      for (const LossTerm& t : recipe(recipe_name).terms) {
        c.add(t.learning_type, t.strategy, t.weight);
      }
    }
    validate(c);
    return c;
  }

  DistillConfig distill_config(const ConaConfig& cona_config,
                               std::uint64_t seed) const {
    DistillConfig dc;
    dc.cona = cona_config;
    dc.seed = seed;
    dc.optim.epochs = epochs;
    dc.optim.batch_size = batch;
    dc.optim.peak_lr = lr;
    dc.optim.warmup_fraction = warmup;
    dc.optim.weight_decay = weight_decay;
    dc.intermediate_parts = parts;
    if (part_strategy == "FD") dc.part_strategy = PartStrategy::FD;
    else if (part_strategy == "SD") dc.part_strategy = PartStrategy::SD;
    else fail(ErrorKind::BadFlag, "--part-strategy must be FD or SD");
    require_positive(batch, "--batch");
    return dc;
  }
};

struct DistillRun {
  DualEncoderBundle bundle;
  DistillResult result;
};

DistillRun run_distill(const DualEncoderBundle& teachers, const DatasetSplit& split,
                       const DistillFlags& flags, const ConaConfig& cona_config,
                       std::uint64_t seed, const MetricsSink& sink) {
  DistillRun run{teachers, {}};
  for (Role r : {Role::TextStudent, Role::ImageStudent}) {
    run.bundle.encoders[static_cast<std::size_t>(r)].reset();
  }
  init_students(run.bundle, flags.students(), seed);
  run.result = distill(run.bundle, split.train, split.validation,
                       flags.distill_config(cona_config, seed), sink);
  return run;
}

DualEncoderBundle load_teachers(const std::string& path) {
  DualEncoderBundle b = io::load_bundle(path);
  if (!b.has(Role::TextTeacher) || !b.has(Role::ImageTeacher)) {
    fail(ErrorKind::FormatError, path + ": checkpoint has no teacher encoders");
  }
  b.at(Role::TextTeacher).params.frozen = true;
  b.at(Role::ImageTeacher).params.frozen = true;
  return b;
}

void print_recall(std::ostream& out, const std::string& label,
                  const RecallReport& r) {
  out << label << ":";
  for (const auto& [k, v] : r.recalls) {
    out << "  R@" << k << "=" << std::fixed << std::setprecision(4) << v;
  }
  out << std::defaultfloat << "  (" << r.num_queries << " queries)\n";
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataCmd {
  Common common;
  std::size_t pairs = 10000;
  std::size_t latent = 16;
  double noise = 0.1;
  std::size_t text_dim = 48;
  std::size_t image_dim = 64;
  bool identity_maps = false;
  std::string out_path;

  void attach(CLI::App* app) {
    common.attach(app);
    app->add_option("--pairs", pairs, "Number of text-image pairs");
    app->add_option("--latent", latent, "Latent dimension");
    app->add_option("--noise", noise, "Per-modality noise scale");
    app->add_option("--text-dim", text_dim);
    app->add_option("--image-dim", image_dim);
    app->add_flag("--identity-maps", identity_maps,
                  "Identity modality maps (dims must equal --latent)");
    app->add_option("--out", out_path, "Output dataset file")->required();
  }

  void run(const CLI::App* app, std::ostream& out) {
    Manifest manifest("gen-data");
    if (pairs < 1) fail(ErrorKind::BadFlag, "--pairs must be >= 1");
    require_positive(latent, "--latent");
    if (!(noise >= 0.0)) fail(ErrorKind::BadFlag, "--noise must be >= 0");
    GenerateOptions o{pairs, latent, noise, common.resolve_seed(),
                      text_dim, image_dim, identity_maps};
    try {
      save_dataset(out_path, generate_pairs(o));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::BadConfig) fail(ErrorKind::BadFlag, e.what());
      throw;
    }
    manifest.write(manifest_path(out_path), app, o.seed, {{"dataset", out_path}});
    out << "wrote " << out_path << " (" << pairs << " pairs, seed " << o.seed << ")\n";
  }
};

struct TrainTeacherCmd {
  Common common;
  std::string data;
  std::string out_path;
  std::string metrics;
  std::size_t layers = 6;
  std::size_t hidden = 64;
  std::size_t dim = 32;
  std::size_t epochs = 10;
  std::size_t batch = 256;
  double lr = 1e-3;
  double warmup = 0.05;
  double weight_decay = 0.1;
  double tau = kDefaultTemperature;
  double val_fraction = 0.1;

  void attach(CLI::App* app) {
    common.attach(app);
    app->add_option("--data", data, "Dataset file")->required();
    app->add_option("--out", out_path, "Teacher checkpoint")->required();
    app->add_option("--metrics", metrics, "NDJSON metrics log");
    app->add_option("--layers", layers);
    app->add_option("--hidden", hidden);
    app->add_option("--dim", dim, "Embedding size d");
    app->add_option("--epochs", epochs);
    app->add_option("--batch", batch);
    app->add_option("--lr", lr, "Peak learning rate");
    app->add_option("--warmup", warmup);
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--tau", tau);
    app->add_option("--val-fraction", val_fraction);
  }

  void run(const CLI::App* app, std::ostream& out) {
    Manifest manifest("train-teacher");
    const std::uint64_t seed = common.resolve_seed();
    require_positive(layers, "--layers");
    require_positive(hidden, "--hidden");
    require_positive(dim, "--dim");
    require_positive(batch, "--batch");
    const SyntheticDataset ds = load_dataset(data);
    const DatasetSplit split = split_dataset(ds, val_fraction);

    TeacherConfig tc;
    tc.text_spec = {ds.text_inputs.cols(), hidden, layers, dim};
    tc.image_spec = {ds.image_inputs.cols(), hidden, layers, dim};
    tc.optim.epochs = epochs;
    tc.optim.batch_size = batch;
    tc.optim.peak_lr = lr;
    tc.optim.warmup_fraction = warmup;
    tc.optim.weight_decay = weight_decay;
    tc.tau = tau;
    tc.seed = seed;
    tc.deterministic = common.deterministic;

    MetricsLog log;
    DualEncoderBundle bundle = init_teachers(tc);
    pretrain_teacher(bundle, split.train, tc, log.sink());
    io::save_bundle(out_path, bundle);
    const fs::path mpath = metrics_path(metrics, out_path);
    log.write(mpath);

    json extra = json::object();
    if (split.validation.size() > 0) {
      const auto recall = evaluate_retrieval(bundle.at(Role::TextTeacher),
                                             bundle.at(Role::ImageTeacher), split.validation);
      print_recall(out, "teacher text->image", recall.text_to_image);
      print_recall(out, "teacher image->text", recall.image_to_text);
      extra["validation"] = to_json(recall);
    }
    manifest.write(manifest_path(out_path), app, seed,
                   {{"checkpoint", out_path}, {"metrics", mpath.string()}, {"dataset", data}},
                   extra);
    out << "wrote " << out_path << "\n";
  }
};

struct DistillCmd {
  Common common;
  DistillFlags flags;
  std::string out_path;
  std::string metrics;

  void attach(CLI::App* app) {
    common.attach(app);
    flags.attach(app, true);
    app->add_option("--out", out_path, "Student checkpoint (full bundle)")->required();
    app->add_option("--metrics", metrics, "NDJSON metrics log");
  }

  void run(const CLI::App* app, std::ostream& out) {
    Manifest manifest("distill");
    const std::uint64_t seed = common.resolve_seed();
    const ConaConfig cona_config = flags.cona(common.deterministic);
    const DatasetSplit split = split_dataset(load_dataset(flags.data), flags.val_fraction);
    const DualEncoderBundle teachers = load_teachers(flags.teacher);

    MetricsLog log;
    DistillRun run = run_distill(teachers, split, flags, cona_config, seed, log.sink());
    io::save_bundle(out_path, run.bundle);
    const fs::path mpath = metrics_path(metrics, out_path);
    log.write(mpath);

    json extra = {{"loss_terms", to_json(cona_config)["terms"]},
                  {"cona_config", to_json(cona_config)},
                  {"steps", run.result.steps}};
    if (run.result.final_recall) {
      print_recall(out, "student text->image", run.result.final_recall->text_to_image);
      print_recall(out, "student image->text", run.result.final_recall->image_to_text);
      extra["validation"] = to_json(*run.result.final_recall);
    }
    manifest.write(manifest_path(out_path), app, seed,
                   {{"checkpoint", out_path}, {"metrics", mpath.string()},
                    {"dataset", flags.data}, {"teacher", flags.teacher}},
                   extra);
    out << "wrote " << out_path << " (" << cona_config.terms.size() << " loss terms, "
        << run.result.steps << " steps)\n";
  }
};

struct AblateCmd {
  Common common;
  DistillFlags flags;
  std::string cells = "all";
  std::size_t seeds = 5;
  std::string out_path = "ablation.jsonl";

  void attach(CLI::App* app) {
    common.attach(app);
    flags.attach(app, false);
    app->add_option("--cells", cells,
                    "'all' or comma-separated LearningType:Strategy cells");
    app->add_option("--seeds", seeds, "Seeds per row (seed, seed+1, ...)");
    app->add_option("--out", out_path, "NDJSON results table");
  }

  std::vector<Cell> selected_cells() const {
    if (cells == "all") return valid_cells();
    return parse_cell_list(cells, "--cells");
  }

  static json summarize(const std::vector<RecallReport>& reports) {
    json out = json::object();
    for (const auto& [k, _] : reports.front().recalls) {
      double sum = 0.0, sq = 0.0;
      for (const auto& r : reports) sum += r.recalls.at(k);
      const double mean = sum / static_cast<double>(reports.size());
      for (const auto& r : reports) sq += (r.recalls.at(k) - mean) * (r.recalls.at(k) - mean);
      const double stddev = reports.size() > 1
                                ? std::sqrt(sq / static_cast<double>(reports.size() - 1))
                                : 0.0;
      out["R@" + std::to_string(k)] = {{"mean", mean}, {"std", stddev}};
    }
    return out;
  }

  void run(const CLI::App* app, std::ostream& out) {
    Manifest manifest("ablate");
    const std::uint64_t base_seed = common.resolve_seed();
    require_positive(seeds, "--seeds");
    const std::vector<Cell> chosen = selected_cells();
    const ConaConfig baseline = flags.cona(common.deterministic);  // motis
    const DatasetSplit split = split_dataset(load_dataset(flags.data), flags.val_fraction);
    if (split.validation.size() == 0) fail(ErrorKind::BadFlag, "ablation needs a validation split");
    const DualEncoderBundle teachers = load_teachers(flags.teacher);

    struct Row {
      std::optional<Cell> cell;
      ConaConfig config;
    };
    std::vector<Row> rows{{std::nullopt, baseline}};
    for (const Cell& c : chosen) {
      Row r{c, baseline};
      r.config.add(c.learning_type, c.strategy);
      rows.push_back(std::move(r));
    }

    const std::size_t n_runs = rows.size() * seeds;
    std::vector<BidirectionalRecall> results(n_runs);
    std::vector<std::string> errors(n_runs);
    auto one = [&](std::size_t job) {
      const Row& row = rows[job / seeds];
      const std::uint64_t seed = base_seed + job % seeds;
      try {
        results[job] = *run_distill(teachers, split, flags, row.config, seed, {}).result.final_recall;
      } catch (const std::exception& e) {
        errors[job] = e.what();
      }
    };
    if (common.deterministic) {
      for (std::size_t j = 0; j < n_runs; ++j) one(j);
    } else {
      const auto n = static_cast<std::int64_t>(n_runs);
#pragma omp parallel for schedule(dynamic, 1)
      for (std::int64_t j = 0; j < n; ++j) one(static_cast<std::size_t>(j));
    }
    for (const std::string& e : errors) {
      if (!e.empty()) fail(ErrorKind::NonFiniteValue, "ablation run failed: " + e);
    }

    std::string table;
    std::vector<json> records;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::vector<RecallReport> t2i, i2t;
      for (std::size_t s = 0; s < seeds; ++s) {
        t2i.push_back(results[r * seeds + s].text_to_image);
        i2t.push_back(results[r * seeds + s].image_to_text);
      }
      json rec = {{"row", rows[r].cell ? to_string(*rows[r].cell) : "baseline"},
                  {"seeds", seeds},
                  {"text_to_image", summarize(t2i)},
                  {"image_to_text", summarize(i2t)}};
      if (rows[r].cell) {
        rec["learning_type"] = to_string(rows[r].cell->learning_type);
        rec["strategy"] = to_string(rows[r].cell->strategy);
        rec["group"] = group_label(rows[r].cell->learning_type);
      } else {
        rec["group"] = "baseline";
        rec["terms"] = to_json(baseline)["terms"];
      }
      table += rec.dump() + "\n";
      records.push_back(std::move(rec));
    }
    io::write_text_atomic(out_path, table);
    print_table(out, records);
    manifest.write(manifest_path(out_path), app, base_seed,
                   {{"results", out_path}, {"dataset", flags.data}, {"teacher", flags.teacher}},
                   {{"rows", rows.size()}});
  }

  // Text->image R@1/5/10 means, one line per learning type, one column per
  // strategy; "\" marks meaningless cells and "-" cells not run.
  static void print_table(std::ostream& out, const std::vector<json>& records) {
    auto cell_text = [](const json& rec) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(1);
      const auto& t = rec["text_to_image"];
      os << 100.0 * t["R@1"]["mean"].get<double>() << "/"
         << 100.0 * t["R@5"]["mean"].get<double>() << "/"
         << 100.0 * t["R@10"]["mean"].get<double>();
      return os.str();
    };
    const bool has_ks = records.front()["text_to_image"].contains("R@10") &&
                        records.front()["text_to_image"].contains("R@5") &&
                        records.front()["text_to_image"].contains("R@1");
    if (!has_ks) return;
    out << "text->image R@1/5/10 (mean over seeds, %)\n";
    out << "baseline (IntraTchStu:InfoNCE): " << cell_text(records.front()) << "\n";
    out << std::left << std::setw(32) << "learning type";
    for (Strategy s : kAllStrategies) out << std::setw(18) << to_string(s);
    out << "\n";
    for (LearningType lt : kAllLearningTypes) {
      out << std::setw(32) << group_label(lt);
      for (Strategy s : kAllStrategies) {
        std::string text = is_valid_cell(lt, s) ? "-" : "\\";
        for (const json& rec : records) {
          if (rec.value("learning_type", "") == to_string(lt) &&
              rec.value("strategy", "") == to_string(s)) {
            text = cell_text(rec);
          }
        }
        out << std::setw(18) << text;
      }
      out << "\n";
    }
    out << std::right;
  }
};

struct EncoderChoice {
  std::string role = "student";

  void attach(CLI::App* app) {
    app->add_option("--role", role, "student | teacher");
  }

  std::pair<const Encoder*, const Encoder*> pick(const DualEncoderBundle& b) const {
    if (role == "student") return {&b.at(Role::TextStudent), &b.at(Role::ImageStudent)};
    if (role == "teacher") return {&b.at(Role::TextTeacher), &b.at(Role::ImageTeacher)};
    fail(ErrorKind::BadFlag, "--role must be 'student' or 'teacher'");
  }
};

SyntheticDataset select_split(const SyntheticDataset& ds, const std::string& which,
                              double fraction, std::size_t& offset) {
  const DatasetSplit split = split_dataset(ds, fraction);
  offset = 0;
  if (which == "val") {
    offset = split.train.size();
    return split.validation;
  }
  if (which == "train") return split.train;
  if (which == "all") return ds;
  fail(ErrorKind::BadFlag, "--split must be val, train or all");
}

void check_encoder_input(const Encoder& e, const Matrix& inputs, const std::string& what) {
  if (inputs.cols() != e.spec.input_dim) {
    fail(ErrorKind::ShapeMismatch, what + " has width " + std::to_string(inputs.cols()) +
                                       " but the encoder expects " +
                                       std::to_string(e.spec.input_dim));
  }
}

struct EvalCmd {
  Common common;
  EncoderChoice choice;
  std::string checkpoint;
  std::string data;
  std::string split = "val";
  double val_fraction = 0.1;
  std::vector<std::size_t> ks = kDefaultRecallKs;
  std::string manifest_out;

  void attach(CLI::App* app) {
    common.attach(app);
    choice.attach(app);
    app->add_option("--checkpoint", checkpoint)->required();
    app->add_option("--data", data)->required();
    app->add_option("--split", split, "val | train | all");
    app->add_option("--val-fraction", val_fraction);
    app->add_option("--k", ks, "Recall cutoffs")->delimiter(',');
    app->add_option("--manifest", manifest_out, "Write a run manifest here");
  }

  void run(const CLI::App* app, std::ostream& out) {
    Manifest manifest("eval");
    const DualEncoderBundle bundle = io::load_bundle(checkpoint);
    const auto [text, image] = choice.pick(bundle);
    std::size_t offset = 0;
    const SyntheticDataset ds = select_split(load_dataset(data), split, val_fraction, offset);
    check_encoder_input(*text, ds.text_inputs, data + " text block");
    check_encoder_input(*image, ds.image_inputs, data + " image block");
    for (std::size_t k : ks) require_positive(k, "--k");
    const BidirectionalRecall r = evaluate_retrieval(*text, *image, ds, ks);
    print_recall(out, choice.role + " text->image", r.text_to_image);
    print_recall(out, choice.role + " image->text", r.image_to_text);
    out << json{{"role", choice.role}, {"split", split}, {"recall", to_json(r)}}.dump() << "\n";
    if (!manifest_out.empty()) {
      manifest.write(manifest_out, app, common.seed,
                     {{"checkpoint", checkpoint}, {"dataset", data}},
                     {{"recall", to_json(r)}});
    }
  }
};

struct IndexCmd {
  Common common;
  EncoderChoice choice;
  std::string checkpoint;
  std::string data;
  std::string modality = "image";
  std::string split = "val";
  double val_fraction = 0.1;
  std::string out_path;

  void attach(CLI::App* app) {
    common.attach(app);
    choice.attach(app);
    app->add_option("--checkpoint", checkpoint)->required();
    app->add_option("--data", data)->required();
    app->add_option("--modality", modality, "Gallery modality: image | text");
    app->add_option("--split", split, "val | train | all");
    app->add_option("--val-fraction", val_fraction);
    app->add_option("--out", out_path, "Index file")->required();
  }

  void run(const CLI::App* app, std::ostream& out) {
    Manifest manifest("index");
    const DualEncoderBundle bundle = io::load_bundle(checkpoint);
    const auto [text, image] = choice.pick(bundle);
    std::size_t offset = 0;
    const SyntheticDataset ds = select_split(load_dataset(data), split, val_fraction, offset);
    const Encoder* enc = nullptr;
    const Matrix* inputs = nullptr;
    if (modality == "image") {
      enc = image;
      inputs = &ds.image_inputs;
    } else if (modality == "text") {
      enc = text;
      inputs = &ds.text_inputs;
    } else {
      fail(ErrorKind::BadFlag, "--modality must be 'image' or 'text'");
    }
    check_encoder_input(*enc, *inputs, data + " " + modality + " block");
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < inputs->rows(); ++i) ids.push_back(std::to_string(offset + i));
    const RetrievalIndex index = build_index(ids, forward(enc->params, enc->spec, *inputs));
    save_index(out_path, index);
    manifest.write(manifest_path(out_path), app, common.seed,
                   {{"index", out_path}, {"checkpoint", checkpoint}, {"dataset", data}},
                   {{"G", index.size()}, {"d", index.dim()}});
    out << "wrote " << out_path << " (" << index.size() << " items, d=" << index.dim() << ")\n";
  }
};

Matrix read_vector_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<double> values;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      values = json::parse(text).get<std::vector<double>>();
    } catch (const json::exception& e) {
      fail(ErrorKind::FormatError, path + ": " + e.what());
    }
  } else {
    std::replace(text.begin(), text.end(), ',', ' ');
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        fail(ErrorKind::FormatError, path + ": not a number '" + tok + "'");
      }
    }
  }
  if (values.empty()) fail(ErrorKind::FormatError, path + ": empty vector");
  const std::size_t n = values.size();
  return Matrix(1, n, std::move(values));
}

struct QueryCmd {
  Common common;
  EncoderChoice choice;
  std::string index_path;
  std::string checkpoint;
  std::string modality = "text";
  std::string input;
  std::size_t k = 10;

  void attach(CLI::App* app) {
    common.attach(app);
    choice.attach(app);
    app->add_option("--index", index_path)->required();
    app->add_option("--checkpoint", checkpoint)->required();
    app->add_option("--modality", modality, "Query modality: text | image");
    app->add_option("--input", input, "Raw input vector (whitespace/comma separated or JSON array)")
        ->required();
    app->add_option("--k", k);
  }

  void run(const CLI::App*, std::ostream& out) {
    require_positive(k, "--k");
    const DualEncoderBundle bundle = io::load_bundle(checkpoint);
    const auto [text, image] = choice.pick(bundle);
    const Encoder* enc = nullptr;
    if (modality == "text") enc = text;
    else if (modality == "image") enc = image;
    else fail(ErrorKind::BadFlag, "--modality must be 'text' or 'image'");
    const RetrievalIndex index = load_index(index_path);
    const Matrix raw = read_vector_file(input);
    check_encoder_input(*enc, raw, input);
    const EmbeddingBatch q = forward(enc->params, enc->spec, raw);
    if (q.d() != index.dim()) {
      fail(ErrorKind::ShapeMismatch, "encoder output d=" + std::to_string(q.d()) +
                                         " but " + index_path + " has d=" +
                                         std::to_string(index.dim()));
    }
    const auto hits = topk(index, q.matrix().row(0), k);
    json j = json::array();
    for (std::size_t i = 0; i < hits.size(); ++i) {
      out << (i + 1) << "\t" << hits[i].id << "\t" << std::setprecision(6) << hits[i].score << "\n";
      j.push_back({{"rank", i + 1}, {"id", hits[i].id}, {"score", hits[i].score}});
    }
    out << json{{"hits", j}}.dump() << "\n";
  }
};

void apply_thread_cap() {
  if (const char* env = std::getenv("CONA_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) {
      fail(ErrorKind::BadFlag, "CONA_THREADS must be a positive integer");
    }
    omp_set_num_threads(static_cast<int>(n));
  }
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out,
        std::ostream& err) {
  CLI::App app{"Fully-connected knowledge-interaction distillation for toy dual encoders", "cona"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  app.option_defaults()->always_capture_default();

  GenDataCmd gen;
  TrainTeacherCmd teacher;
  DistillCmd distill_cmd;
  AblateCmd ablate;
  EvalCmd eval;
  IndexCmd index;
  QueryCmd query;
  auto* s_gen = app.add_subcommand("gen-data", "Generate a synthetic paired dataset");
  auto* s_teacher = app.add_subcommand("train-teacher", "Pre-train text/image teachers");
  auto* s_distill = app.add_subcommand("distill", "Distill students from frozen teachers");
  auto* s_ablate = app.add_subcommand("ablate", "Baseline + single-cell ablation sweep");
  auto* s_eval = app.add_subcommand("eval", "Recall@k in both retrieval directions");
  auto* s_index = app.add_subcommand("index", "Build a retrieval index from a checkpoint");
  auto* s_query = app.add_subcommand("query", "Query an index with a raw input vector");
  gen.attach(s_gen);
  teacher.attach(s_teacher);
  distill_cmd.attach(s_distill);
  ablate.attach(s_ablate);
  eval.attach(s_eval);
  index.attach(s_index);
  query.attach(s_query);

  try {
    apply_thread_cap();
    std::vector<std::string> args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kSuccess;
    } catch (const CLI::CallForVersion&) {
      out << kToolVersion << "\n";
      return kSuccess;
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) {
        out << app.help();
        return kSuccess;
      }
      print_error(err, "BadFlag", kFlagError, e.what());
      return kFlagError;
    }
    for (auto* sub : app.get_subcommands()) {
      if (sub->get_help_ptr() && sub->get_help_ptr()->count() > 0) {
        out << sub->help();
        return kSuccess;
      }
    }

    if (s_gen->parsed()) gen.run(s_gen, out);
    else if (s_teacher->parsed()) teacher.run(s_teacher, out);
    else if (s_distill->parsed()) distill_cmd.run(s_distill, out);
    else if (s_ablate->parsed()) ablate.run(s_ablate, out);
    else if (s_eval->parsed()) eval.run(s_eval, out);
    else if (s_index->parsed()) index.run(s_index, out);
    else if (s_query->parsed()) query.run(s_query, out);
    return kSuccess;
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    print_error(err, to_string(e.kind()), code, e.what());
    return code;
  } catch (const std::exception& e) {
    print_error(err, "InternalError", kDataError, e.what());
    return kDataError;
  }
}

}  // namespace cona::cli
