#include "cona/encoder.hpp"

#include <cmath>
#include <string>

#include "cona/error.hpp"
#include "cona/numerics.hpp"

namespace cona {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void check_dense(const Dense& d, std::size_t out, std::size_t in,
                 const std::string& name) {
  if (d.weight.rows() != out || d.weight.cols() != in ||
      d.bias.rows() != 1 || d.bias.cols() != out) {
    fail(ErrorKind::IncompatibleShapes,
         name + ": expected weight " + std::to_string(out) + "x" +
             std::to_string(in) + ", got " + shape_str(d.weight));
  }
}

std::size_t layer_input_dim(const EncoderSpec& spec, std::size_t layer) {
  return layer == 0 ? spec.input_dim : spec.hidden_dim;
}

Dense random_dense(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Dense d{Matrix(out, in), Matrix(1, out)};
  for (double& v : d.weight.values()) v = dist(rng);
  for (double& v : d.bias.values()) v = dist(rng);
  return d;
}

Matrix affine(const Matrix& x, const Dense& d) {
  Matrix z = matmul_t(x, d.weight);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < z.cols(); ++j) r[j] += d.bias(0, j);
  }
  return z;
}

void activate(Matrix& z, Activation act) {
  if (act == Activation::Tanh) {
    for (double& v : z.values()) v = std::tanh(v);
  }
}

}  // namespace

void validate(const EncoderSpec& spec) {
  if (spec.input_dim < 1 || spec.hidden_dim < 1 || spec.num_layers < 1 ||
      spec.output_dim < 1) {
    fail(ErrorKind::BadConfig, "encoder dims and num_layers must be >= 1");
  }
}

std::vector<Matrix*> EncoderParams::tensors() {
  std::vector<Matrix*> out;
  for (Dense& d : layers) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  out.push_back(&head.weight);
  out.push_back(&head.bias);
  return out;
}

std::vector<const Matrix*> EncoderParams::tensors() const {
  std::vector<const Matrix*> out;
  for (const Dense& d : layers) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  out.push_back(&head.weight);
  out.push_back(&head.bias);
  return out;
}

std::vector<const Matrix*> EncoderGrads::tensors() const {
  std::vector<const Matrix*> out;
  for (const Dense& d : layers) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
  }
  out.push_back(&head.weight);
  out.push_back(&head.bias);
  return out;
}

void check_params(const EncoderParams& params, const EncoderSpec& spec) {
  validate(spec);
  if (params.layers.size() != spec.num_layers) {
    fail(ErrorKind::IncompatibleShapes,
         "expected " + std::to_string(spec.num_layers) + " layers, got " +
             std::to_string(params.layers.size()));
  }
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    check_dense(params.layers[l], spec.hidden_dim, layer_input_dim(spec, l),
                "layer " + std::to_string(l + 1));
  }
  check_dense(params.head, spec.output_dim, spec.hidden_dim, "head");
}

EncoderParams init_params(const EncoderSpec& spec, std::mt19937_64& rng) {
  validate(spec);
  EncoderParams p;
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    p.layers.push_back(random_dense(spec.hidden_dim, layer_input_dim(spec, l), rng));
  }
  p.head = random_dense(spec.output_dim, spec.hidden_dim, rng);
  return p;
}

EncoderParams identity_params(const EncoderSpec& spec) {
  validate(spec);
  if (spec.input_dim != spec.hidden_dim || spec.hidden_dim != spec.output_dim) {
    fail(ErrorKind::IncompatibleShapes, "identity encoder needs square layers");
  }
  EncoderParams p;
  const std::size_t w = spec.hidden_dim;
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    p.layers.push_back({Matrix::identity(w), Matrix(1, w)});
  }
  p.head = {Matrix::identity(w), Matrix(1, w)};
  return p;
}

ForwardCache forward_cached(const EncoderParams& params,
                            const EncoderSpec& spec, const Matrix& inputs) {
  check_params(params, spec);
  if (inputs.cols() != spec.input_dim) {
    fail(ErrorKind::ShapeMismatch,
         "encoder input width " + std::to_string(inputs.cols()) +
             " != spec input_dim " + std::to_string(spec.input_dim));
  }
  ForwardCache cache;
  cache.input = inputs;
  const Matrix* h = &cache.input;
  for (const Dense& layer : params.layers) {
    Matrix z = affine(*h, layer);
    activate(z, spec.activation);
    cache.hidden.push_back(std::move(z));
    h = &cache.hidden.back();
  }
  cache.raw = affine(*h, params.head);
  cache.embedding = l2_normalize_rows(cache.raw);
  return cache;
}

EmbeddingBatch forward(const EncoderParams& params, const EncoderSpec& spec,
                       const Matrix& inputs) {
  return EmbeddingBatch::normalized(forward_cached(params, spec, inputs).raw);
}

std::vector<std::size_t> part_boundaries(std::size_t num_layers,
                                         std::size_t parts) {
  if (parts < 1 || parts > num_layers) {
    fail(ErrorKind::BadParts, "parts must be in [1, " +
                                  std::to_string(num_layers) + "], got " +
                                  std::to_string(parts));
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k <= parts; ++k) {
    out.push_back((k * num_layers + parts - 1) / parts);
  }
  return out;
}

const Matrix& tap_at(const ForwardCache& cache, std::size_t boundary) {
  if (boundary < 1 || boundary > cache.hidden.size()) {
    fail(ErrorKind::BadParts, "tap boundary out of range");
  }
  return boundary == cache.hidden.size() ? cache.raw
                                         : cache.hidden[boundary - 1];
}

TappedForward forward_with_taps(const EncoderParams& params,
                                const EncoderSpec& spec, const Matrix& inputs,
                                std::size_t parts) {
  const auto bounds = part_boundaries(spec.num_layers, parts);
  ForwardCache cache = forward_cached(params, spec, inputs);
  std::vector<Matrix> taps;
  for (std::size_t b : bounds) taps.push_back(tap_at(cache, b));
  return {EmbeddingBatch::normalized(cache.raw), std::move(taps)};
}

EncoderParams init_student_from_teacher(const EncoderParams& teacher,
                                        const EncoderSpec& student_spec) {
  validate(student_spec);
  if (student_spec.num_layers > teacher.layers.size()) {
    fail(ErrorKind::IncompatibleShapes,
         "student has more layers than the teacher");
  }
  EncoderParams student;
  for (std::size_t l = 0; l < student_spec.num_layers; ++l) {
    student.layers.push_back(teacher.layers[l]);
  }
  student.head = teacher.head;
  student.frozen = false;
  check_params(student, student_spec);
  return student;
}

EncoderGrads backward_raw(const EncoderParams& params, const EncoderSpec& spec,
                          const ForwardCache& cache, const Matrix& grad_raw,
                          const std::vector<TapGrad>& taps) {
  check_params(params, spec);
  const std::size_t num_layers = spec.num_layers;
  if (!grad_raw.same_shape(cache.raw)) {
    fail(ErrorKind::ShapeMismatch, "backward: upstream shape " +
                                       shape_str(grad_raw) + " != output " +
                                       shape_str(cache.raw));
  }
  std::vector<std::optional<Matrix>> tap_sum(num_layers + 1);
  for (const TapGrad& t : taps) {
    const Matrix& target = tap_at(cache, t.boundary);
    if (!t.grad.same_shape(target)) {
      fail(ErrorKind::ShapeMismatch, "tap gradient shape mismatch");
    }
    if (tap_sum[t.boundary]) *tap_sum[t.boundary] += t.grad;
    else tap_sum[t.boundary] = t.grad;
  }

  Matrix g_raw = grad_raw;
  if (tap_sum[num_layers]) g_raw += *tap_sum[num_layers];

  EncoderGrads grads;
  grads.layers.resize(num_layers);
  grads.head.weight = matmul_tn(g_raw, cache.hidden.back());
  grads.head.bias = column_sums(g_raw);
  Matrix g_h = matmul(g_raw, params.head.weight);

  for (std::size_t l = num_layers; l-- > 0;) {
    if (l + 1 < num_layers && tap_sum[l + 1]) g_h += *tap_sum[l + 1];
    if (spec.activation == Activation::Tanh) {
      const Matrix& h = cache.hidden[l];
      for (std::size_t i = 0; i < g_h.size(); ++i) {
        const double hv = h.values()[i];
        g_h.values()[i] *= 1.0 - hv * hv;
      }
    }
    const Matrix& below = l == 0 ? cache.input : cache.hidden[l - 1];
    grads.layers[l].weight = matmul_tn(g_h, below);
    grads.layers[l].bias = column_sums(g_h);
    g_h = matmul(g_h, params.layers[l].weight);
  }
  grads.input = std::move(g_h);
  return grads;
}

EncoderGrads backward(const EncoderParams& params, const EncoderSpec& spec,
                      const ForwardCache& cache, const Matrix& upstream,
                      const std::vector<TapGrad>& taps) {
  return backward_raw(params, spec, cache,
                      l2_normalize_rows_backward(cache.raw, cache.embedding, upstream),
                      taps);
}

EncoderGrads backward(const EncoderParams& params, const EncoderSpec& spec,
                      const Matrix& inputs, const Matrix& upstream) {
  return backward(params, spec, forward_cached(params, spec, inputs), upstream);
}

Encoder& DualEncoderBundle::at(Role role) {
  auto& slot = encoders[static_cast<std::size_t>(role)];
  if (!slot) fail(ErrorKind::BadConfig, "bundle has no " + std::string(to_string(role)));
  return *slot;
}

const Encoder& DualEncoderBundle::at(Role role) const {
  const auto& slot = encoders[static_cast<std::size_t>(role)];
  if (!slot) fail(ErrorKind::BadConfig, "bundle has no " + std::string(to_string(role)));
  return *slot;
}

void DualEncoderBundle::check_output_dims() const {
  std::optional<std::size_t> d;
  for (const auto& e : encoders) {
    if (!e) continue;
    if (d && *d != e->spec.output_dim) {
      fail(ErrorKind::IncompatibleShapes, "encoders disagree on output_dim");
    }
    d = e->spec.output_dim;
  }
}

nlohmann::json to_json(const EncoderSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"hidden_dim", spec.hidden_dim},
          {"num_layers", spec.num_layers},
          {"output_dim", spec.output_dim},
          {"activation", spec.activation == Activation::Tanh ? "tanh" : "identity"}};
}

EncoderSpec encoder_spec_from_json(const nlohmann::json& doc) {
  EncoderSpec spec;
  try {
    spec.input_dim = doc.at("input_dim").get<std::size_t>();
    spec.hidden_dim = doc.at("hidden_dim").get<std::size_t>();
    spec.num_layers = doc.at("num_layers").get<std::size_t>();
    spec.output_dim = doc.at("output_dim").get<std::size_t>();
    const auto act = doc.at("activation").get<std::string>();
    if (act == "tanh") spec.activation = Activation::Tanh;
    else if (act == "identity") spec.activation = Activation::Identity;
    else fail(ErrorKind::FormatError, "unknown activation '" + act + "'");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::FormatError, std::string("bad encoder spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

}  // namespace cona
