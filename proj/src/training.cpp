#include "cona/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "cona/error.hpp"
#include "cona/io.hpp"
#include "cona/numerics.hpp"

namespace cona {

namespace {

// Independent generator streams derived from one user seed.
enum class Stream : std::uint64_t {
  DataMaps = 1,
  DataSamples = 2,
  TeacherInit = 3,
  StudentInit = 4,
  Shuffle = 5,
  PartProjection = 6,
};

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

Matrix gaussian_map(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
  Matrix m(rows, cols);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

Exec exec_for(bool deterministic) {
  return deterministic ? Exec::Serial : Exec::Parallel;
}

void check_optim(const OptimConfig& optim) {
  if (optim.batch_size < 1) fail(ErrorKind::BadConfig, "batch_size must be >= 1");
  if (!(optim.peak_lr > 0.0)) fail(ErrorKind::BadConfig, "peak_lr must be > 0");
  if (!(optim.warmup_fraction >= 0.0 && optim.warmup_fraction <= 1.0)) {
    fail(ErrorKind::BadConfig, "warmup_fraction must be in [0, 1]");
  }
}

// Batches of row indices for one epoch, shuffled by `rng`.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n,
                                                    std::size_t batch_size,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

nlohmann::json term_record(const ConaConfig& config, const ConaLoss& loss) {
  nlohmann::json terms = nlohmann::json::array();
  for (std::size_t t = 0; t < config.terms.size(); ++t) {
    const LossTerm& term = config.terms[t];
    terms.push_back({{"cell", to_string(Cell{term.learning_type, term.strategy})},
                     {"weight", term.weight},
                     {"value", loss.term_values[t]}});
  }
  return terms;
}

// Learned map from a student tap width to the matching teacher tap width.
struct PartProjection {
  std::optional<Matrix> weight;  // teacher_width × student_width
};

struct PartLoss {
  double value = 0.0;
  Matrix grad_student_tap;
  std::optional<Matrix> grad_projection;
};

PartLoss part_loss(const Matrix& student_tap, const Matrix& teacher_tap,
                   const PartProjection& proj, PartStrategy strategy) {
  const EmbeddingBatch target = EmbeddingBatch::normalized(teacher_tap, true);
  PartLoss out;
  if (strategy == PartStrategy::SD) {
    const EmbeddingBatch pred = EmbeddingBatch::normalized(student_tap);
    LossValue lv = similarity_distance(pred, pred, target, target);
    Matrix g = *lv.grads[0] + *lv.grads[1];
    out.value = lv.value;
    out.grad_student_tap = l2_normalize_rows_backward(student_tap, pred.matrix(), g);
    return out;
  }
  const Matrix projected = proj.weight ? matmul_t(student_tap, *proj.weight) : student_tap;
  const EmbeddingBatch pred = EmbeddingBatch::normalized(projected);
  LossValue lv = feature_distance(pred, target);
  out.value = lv.value;
  const Matrix g_proj = l2_normalize_rows_backward(projected, pred.matrix(), *lv.grads[0]);
  if (proj.weight) {
    out.grad_projection = matmul_tn(g_proj, student_tap);
    out.grad_student_tap = matmul(g_proj, *proj.weight);
  } else {
    out.grad_student_tap = g_proj;
  }
  return out;
}

struct TeacherTaps {
  ForwardCache text;
  ForwardCache image;
};

}  // namespace

// ---------------------------------------------------------------------------

SyntheticDataset generate_pairs(const GenerateOptions& o) {
  if (o.pairs < 1) fail(ErrorKind::BadConfig, "pairs must be >= 1");
  if (o.latent_dim < 1 || o.text_dim < 1 || o.image_dim < 1) {
    fail(ErrorKind::BadConfig, "dimensions must be >= 1");
  }
  if (!(o.noise >= 0.0) || !std::isfinite(o.noise)) {
    fail(ErrorKind::BadConfig, "noise must be finite and >= 0");
  }
  Matrix map_t, map_i;
  if (o.identity_maps) {
    if (o.text_dim != o.latent_dim || o.image_dim != o.latent_dim) {
      fail(ErrorKind::BadConfig, "identity maps need text_dim == image_dim == latent");
    }
    map_t = Matrix::identity(o.latent_dim);
    map_i = Matrix::identity(o.latent_dim);
  } else {
    auto maps_rng = make_rng(o.seed, Stream::DataMaps);
    map_t = gaussian_map(o.text_dim, o.latent_dim, maps_rng);
    map_i = gaussian_map(o.image_dim, o.latent_dim, maps_rng);
  }

  auto rng = make_rng(o.seed, Stream::DataSamples);
  std::normal_distribution<double> unit(0.0, 1.0);
  Matrix latent(o.pairs, o.latent_dim);
  for (double& v : latent.values()) v = unit(rng);

  SyntheticDataset ds;
  ds.text_inputs = serial::matmul_t(latent, map_t);
  ds.image_inputs = serial::matmul_t(latent, map_i);
  for (double& v : ds.text_inputs.values()) v += o.noise * unit(rng);
  for (double& v : ds.image_inputs.values()) v += o.noise * unit(rng);
  ds.latent_dim = o.latent_dim;
  ds.noise = o.noise;
  ds.seed = o.seed;
  return ds;
}

void save_dataset(const std::filesystem::path& path, const SyntheticDataset& ds) {
  io::Container c;
  c.header = {{"kind", "dataset"},
              {"format_version", io::kFormatVersion},
              {"M", ds.size()},
              {"text_dim", ds.text_inputs.cols()},
              {"image_dim", ds.image_inputs.cols()},
              {"latent_dim", ds.latent_dim},
              {"noise", ds.noise},
              {"seed", ds.seed}};
  c.add_block("text", ds.text_inputs);
  c.add_block("image", ds.image_inputs);
  io::save_container(path, c);
}

SyntheticDataset load_dataset(const std::filesystem::path& path) {
  io::Container c = io::load_container(path, "dataset");
  SyntheticDataset ds;
  ds.text_inputs = c.block("text");
  ds.image_inputs = c.block("image");
  try {
    ds.latent_dim = c.header.at("latent_dim").get<std::size_t>();
    ds.noise = c.header.at("noise").get<double>();
    ds.seed = c.header.at("seed").get<std::uint64_t>();
    if (c.header.at("M").get<std::size_t>() != ds.text_inputs.rows()) {
      fail(ErrorKind::FormatError, "dataset header M disagrees with blocks");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::FormatError, std::string("bad dataset header: ") + e.what());
  }
  if (ds.text_inputs.rows() != ds.image_inputs.rows()) {
    fail(ErrorKind::FormatError, "dataset text/image row counts differ");
  }
  return ds;
}

DatasetSplit split_dataset(const SyntheticDataset& ds, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    fail(ErrorKind::BadConfig, "validation fraction must be in [0, 1)");
  }
  const auto held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size())));
  const std::size_t cut = ds.size() - held;
  DatasetSplit split{ds, ds};
  split.train.text_inputs = slice_rows(ds.text_inputs, 0, cut);
  split.train.image_inputs = slice_rows(ds.image_inputs, 0, cut);
  split.validation.text_inputs = slice_rows(ds.text_inputs, cut, ds.size());
  split.validation.image_inputs = slice_rows(ds.image_inputs, cut, ds.size());
  return split;
}

// ---------------------------------------------------------------------------

double lr_at(const ScheduleSpec& s, std::size_t step) {
  if (s.warmup_steps > s.total_steps) {
    fail(ErrorKind::BadConfig, "warmup_steps exceeds total_steps");
  }
  if (step > s.total_steps) {
    fail(ErrorKind::StepOutOfRange, "step " + std::to_string(step) +
                                        " beyond total " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (s.total_steps == s.warmup_steps) return s.peak_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<const ParamBlock> params, OptimizerState& st,
                double lr) {
  if (!(lr >= 0.0)) fail(ErrorKind::BadConfig, "learning rate must be >= 0");
  if (st.first_moment.empty()) {
    for (const ParamBlock& p : params) {
      st.first_moment.emplace_back(p.value->rows(), p.value->cols());
      st.second_moment.emplace_back(p.value->rows(), p.value->cols());
    }
  }
  if (st.first_moment.size() != params.size()) {
    fail(ErrorKind::ShapeMismatch, "optimizer state tracks a different parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].value->same_shape(*params[i].grad) ||
        !params[i].value->same_shape(st.first_moment[i])) {
      fail(ErrorKind::ShapeMismatch, "parameter/gradient shape mismatch in block " +
                                         std::to_string(i));
    }
  }

  ++st.step;
  const double t = static_cast<double>(st.step);
  const double bias1 = 1.0 - std::pow(st.beta1, t);
  const double bias2 = 1.0 - std::pow(st.beta2, t);
  const double decay = 1.0 - lr * st.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].frozen) continue;
    auto p = params[i].value->values();
    auto g = params[i].grad->values();
    auto m = st.first_moment[i].values();
    auto v = st.second_moment[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] *= decay;
      m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
      v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / bias1) / (std::sqrt(v[k] / bias2) + st.eps);
    }
  }
}

// ---------------------------------------------------------------------------

BidirectionalRecall evaluate_retrieval(const Encoder& text_encoder,
                                       const Encoder& image_encoder,
                                       const SyntheticDataset& data,
                                       const std::vector<std::size_t>& ks) {
  const EmbeddingBatch text = forward(text_encoder.params, text_encoder.spec, data.text_inputs);
  const EmbeddingBatch image = forward(image_encoder.params, image_encoder.spec, data.image_inputs);
  std::vector<std::string> ids;
  ids.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) ids.push_back(std::to_string(i));
  BidirectionalRecall out;
  out.text_to_image = recall_at_k(build_index(ids, image), text, ids, ks);
  out.image_to_text = recall_at_k(build_index(ids, text), image, ids, ks);
  return out;
}

nlohmann::json to_json(const RecallReport& report) {
  nlohmann::json recalls = nlohmann::json::object();
  for (const auto& [k, r] : report.recalls) recalls["R@" + std::to_string(k)] = r;
  return {{"num_queries", report.num_queries}, {"recall", recalls}};
}

nlohmann::json to_json(const BidirectionalRecall& recall) {
  return {{"text_to_image", to_json(recall.text_to_image)},
          {"image_to_text", to_json(recall.image_to_text)}};
}

// ---------------------------------------------------------------------------

std::size_t total_steps(std::size_t train_size, const OptimConfig& optim) {
  check_optim(optim);
  const std::size_t per_epoch = (train_size + optim.batch_size - 1) / optim.batch_size;
  return per_epoch * optim.epochs;
}

ScheduleSpec make_schedule(std::size_t train_size, const OptimConfig& optim) {
  const std::size_t total = total_steps(train_size, optim);
  const auto warmup = static_cast<std::size_t>(
      std::llround(optim.warmup_fraction * static_cast<double>(total)));
  return {optim.peak_lr, std::min(warmup, total), total};
}

DualEncoderBundle init_teachers(const TeacherConfig& config) {
  auto rng = make_rng(config.seed, Stream::TeacherInit);
  DualEncoderBundle bundle;
  bundle.set(Role::TextTeacher, {config.text_spec, init_params(config.text_spec, rng)});
  bundle.set(Role::ImageTeacher, {config.image_spec, init_params(config.image_spec, rng)});
  bundle.check_output_dims();
  return bundle;
}

void pretrain_teacher(DualEncoderBundle& bundle, const SyntheticDataset& train,
                      const TeacherConfig& config, const MetricsSink& sink) {
  ExecScope scope(exec_for(config.deterministic));
  check_optim(config.optim);
  Encoder& text = bundle.at(Role::TextTeacher);
  Encoder& image = bundle.at(Role::ImageTeacher);
  bundle.check_output_dims();
  text.params.frozen = false;
  image.params.frozen = false;

  ConaConfig clip = recipe("clip");
  clip.tau = config.tau;
  clip.deterministic = config.deterministic;

  const ScheduleSpec schedule = make_schedule(train.size(), config.optim);
  OptimizerState opt;
  opt.beta1 = config.optim.beta1;
  opt.beta2 = config.optim.beta2;
  opt.eps = config.optim.eps;
  opt.weight_decay = config.optim.weight_decay;
  auto rng = make_rng(config.seed, Stream::Shuffle);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.optim.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(train.size(), config.optim.batch_size, rng)) {
      const Matrix xt = gather_rows(train.text_inputs, batch);
      const Matrix xi = gather_rows(train.image_inputs, batch);
      const ForwardCache ct = forward_cached(text.params, text.spec, xt);
      const ForwardCache ci = forward_cached(image.params, image.spec, xi);
      const EmbeddingBatch ft(ct.embedding);
      const EmbeddingBatch fi(ci.embedding);
      const ConaLoss loss = evaluate(clip, ft, fi, ft.as_detached(), fi.as_detached());

      const EncoderGrads gt = backward(text.params, text.spec, ct, *loss.grads[0]);
      const EncoderGrads gi = backward(image.params, image.spec, ci, *loss.grads[1]);
      std::vector<ParamBlock> blocks;
      auto pt = text.params.tensors();
      auto pi = image.params.tensors();
      auto g_t = gt.tensors();
      auto g_i = gi.tensors();
      for (std::size_t k = 0; k < pt.size(); ++k) blocks.push_back({pt[k], g_t[k]});
      for (std::size_t k = 0; k < pi.size(); ++k) blocks.push_back({pi[k], g_i[k]});

      if (!std::isfinite(loss.value)) {
        fail(ErrorKind::NonFiniteValue, "teacher loss is not finite at step " +
                                            std::to_string(step + 1));
      }
      ++step;
      const double lr = lr_at(schedule, step);
      adamw_step(blocks, opt, lr);
      if (sink) {
        sink({{"type", "step"}, {"phase", "teacher"}, {"epoch", epoch},
              {"step", step}, {"lr", lr}, {"loss", loss.value}});
      }
    }
  }
  text.params.frozen = true;
  image.params.frozen = true;
}

void init_students(DualEncoderBundle& bundle, const StudentConfig& config,
                   std::uint64_t seed) {
  auto rng = make_rng(seed, Stream::StudentInit);
  auto make = [&](Role teacher_role, std::size_t layers, StudentInit init) {
    const Encoder& teacher = bundle.at(teacher_role);
    EncoderSpec spec = teacher.spec;
    spec.num_layers = layers;
    validate(spec);
    Encoder student{spec, init == StudentInit::FromTeacher
                              ? init_student_from_teacher(teacher.params, spec)
                              : init_params(spec, rng)};
    student.params.frozen = false;
    return student;
  };
  Encoder text = make(Role::TextTeacher, config.text_layers, config.text_init);
  Encoder image = make(Role::ImageTeacher, config.image_layers, config.image_init);
  bundle.set(Role::TextStudent, std::move(text));
  bundle.set(Role::ImageStudent, std::move(image));
}

DistillResult distill(DualEncoderBundle& bundle, const SyntheticDataset& train,
                      const SyntheticDataset& validation,
                      const DistillConfig& config, const MetricsSink& sink) {
  const ConaConfig& cona = config.cona;
  validate(cona);
  check_optim(config.optim);
  ExecScope scope(exec_for(cona.deterministic));

  const Encoder& t_tch = bundle.at(Role::TextTeacher);
  const Encoder& i_tch = bundle.at(Role::ImageTeacher);
  Encoder& t_stu = bundle.at(Role::TextStudent);
  Encoder& i_stu = bundle.at(Role::ImageStudent);
  bundle.check_output_dims();
  if (!t_tch.params.frozen || !i_tch.params.frozen) {
    fail(ErrorKind::BadConfig, "teachers must be frozen before distillation");
  }
  if (t_stu.params.frozen || i_stu.params.frozen) {
    fail(ErrorKind::BadConfig, "students must not be frozen");
  }

  // Frozen teachers: encode the training set once.
  const TeacherTaps teacher{forward_cached(t_tch.params, t_tch.spec, train.text_inputs),
                            forward_cached(i_tch.params, i_tch.spec, train.image_inputs)};

  const std::size_t parts = config.intermediate_parts;
  std::vector<std::size_t> t_stu_bounds, i_stu_bounds, t_tch_bounds, i_tch_bounds;
  std::vector<PartProjection> t_proj, i_proj;
  if (parts > 0) {
    t_stu_bounds = part_boundaries(t_stu.spec.num_layers, parts);
    i_stu_bounds = part_boundaries(i_stu.spec.num_layers, parts);
    t_tch_bounds = part_boundaries(t_tch.spec.num_layers, parts);
    i_tch_bounds = part_boundaries(i_tch.spec.num_layers, parts);
    auto proj_rng = make_rng(config.seed, Stream::PartProjection);
    auto make_proj = [&](const ForwardCache& tch_cache, std::size_t tb,
                         const Encoder& stu, std::size_t sb) {
      const std::size_t tw = tap_at(tch_cache, tb).cols();
      const std::size_t sw = sb == stu.spec.num_layers ? stu.spec.output_dim
                                                       : stu.spec.hidden_dim;
      PartProjection p;
      if (config.part_strategy == PartStrategy::FD && tw != sw) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(sw));
        std::uniform_real_distribution<double> dist(-bound, bound);
        p.weight = Matrix(tw, sw);
        for (double& v : p.weight->values()) v = dist(proj_rng);
      }
      return p;
    };
    for (std::size_t k = 0; k < parts; ++k) {
      t_proj.push_back(make_proj(teacher.text, t_tch_bounds[k], t_stu, t_stu_bounds[k]));
      i_proj.push_back(make_proj(teacher.image, i_tch_bounds[k], i_stu, i_stu_bounds[k]));
    }
  }

  const ScheduleSpec schedule = make_schedule(train.size(), config.optim);
  OptimizerState opt;
  opt.beta1 = config.optim.beta1;
  opt.beta2 = config.optim.beta2;
  opt.eps = config.optim.eps;
  opt.weight_decay = config.optim.weight_decay;
  auto rng = make_rng(config.seed, Stream::Shuffle);

  DistillResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.optim.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(train.size(), config.optim.batch_size, rng)) {
      const Matrix xt = gather_rows(train.text_inputs, batch);
      const Matrix xi = gather_rows(train.image_inputs, batch);
      const ForwardCache cts = forward_cached(t_stu.params, t_stu.spec, xt);
      const ForwardCache cis = forward_cached(i_stu.params, i_stu.spec, xi);
      const EmbeddingBatch f_ts(cts.embedding);
      const EmbeddingBatch f_is(cis.embedding);
      const EmbeddingBatch f_tt(gather_rows(teacher.text.embedding, batch), true);
      const EmbeddingBatch f_it(gather_rows(teacher.image.embedding, batch), true);

      ConaLoss loss = evaluate(cona, f_ts, f_is, f_tt, f_it);
      double total = loss.value;

      std::vector<TapGrad> t_taps, i_taps;
      std::vector<double> part_values;
      std::vector<std::optional<Matrix>> t_proj_grads(parts), i_proj_grads(parts);
      for (std::size_t k = 0; k < parts; ++k) {
        const Matrix tt_tap = gather_rows(tap_at(teacher.text, t_tch_bounds[k]), batch);
        const Matrix it_tap = gather_rows(tap_at(teacher.image, i_tch_bounds[k]), batch);
        PartLoss pt = part_loss(tap_at(cts, t_stu_bounds[k]), tt_tap, t_proj[k], config.part_strategy);
        PartLoss pi = part_loss(tap_at(cis, i_stu_bounds[k]), it_tap, i_proj[k], config.part_strategy);
        part_values.push_back(pt.value + pi.value);
        total += pt.value + pi.value;
        t_taps.push_back({t_stu_bounds[k], std::move(pt.grad_student_tap)});
        i_taps.push_back({i_stu_bounds[k], std::move(pi.grad_student_tap)});
        t_proj_grads[k] = std::move(pt.grad_projection);
        i_proj_grads[k] = std::move(pi.grad_projection);
      }

      const EncoderGrads gts = backward(t_stu.params, t_stu.spec, cts, *loss.grads[0], t_taps);
      const EncoderGrads gis = backward(i_stu.params, i_stu.spec, cis, *loss.grads[1], i_taps);

      std::vector<ParamBlock> blocks;
      auto pts = t_stu.params.tensors();
      auto pis = i_stu.params.tensors();
      auto g_ts = gts.tensors();
      auto g_is = gis.tensors();
      for (std::size_t k = 0; k < pts.size(); ++k) blocks.push_back({pts[k], g_ts[k]});
      for (std::size_t k = 0; k < pis.size(); ++k) blocks.push_back({pis[k], g_is[k]});
      for (std::size_t k = 0; k < parts; ++k) {
        if (t_proj[k].weight) blocks.push_back({&*t_proj[k].weight, &*t_proj_grads[k]});
        if (i_proj[k].weight) blocks.push_back({&*i_proj[k].weight, &*i_proj_grads[k]});
      }

      if (!std::isfinite(total)) {
        fail(ErrorKind::NonFiniteValue, "distillation loss is not finite at step " +
                                            std::to_string(step + 1));
      }
      ++step;
      const double lr = lr_at(schedule, step);
      adamw_step(blocks, opt, lr);

      if (sink) {
        nlohmann::json rec = {{"type", "step"}, {"phase", "distill"},
                              {"epoch", epoch}, {"step", step},
                              {"lr", lr},       {"loss", total},
                              {"terms", term_record(cona, loss)}};
        if (parts > 0) rec["parts"] = part_values;
        sink(rec);
      }
    }
    if (validation.size() > 0) {
      result.final_recall = evaluate_retrieval(t_stu, i_stu, validation, config.ks);
      if (sink) {
        sink({{"type", "epoch"}, {"epoch", epoch}, {"step", step},
              {"validation", to_json(*result.final_recall)}});
      }
    }
  }
  if (config.optim.epochs == 0 && validation.size() > 0) {
    result.final_recall = evaluate_retrieval(t_stu, i_stu, validation, config.ks);
  }
  result.steps = step;
  return result;
}

}  // namespace cona
