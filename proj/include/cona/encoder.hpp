#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cona/graph.hpp"
#include "cona/losses.hpp"
#include "cona/matrix.hpp"

namespace cona {

enum class Activation { Tanh, Identity };

/// Toy encoder: `num_layers` affine + activation layers of width
/// `hidden_dim`, a linear head to `output_dim`, then row L2 normalization.
struct EncoderSpec {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 1;
  std::size_t output_dim = 32;
  Activation activation = Activation::Tanh;

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

void validate(const EncoderSpec& spec);

struct Dense {
  Matrix weight;  // out × in
  Matrix bias;    // 1 × out

  friend bool operator==(const Dense&, const Dense&) = default;
};

struct EncoderParams {
  std::vector<Dense> layers;
  Dense head;
  bool frozen = false;

  /// Parameter tensors in declaration order: (weight, bias) per layer, then
  /// the head.
  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Throws IncompatibleShapes if `params` does not fit `spec`.
void check_params(const EncoderParams& params, const EncoderSpec& spec);

/// Uniform in ±1/sqrt(fan_in) for weights and biases.
EncoderParams init_params(const EncoderSpec& spec, std::mt19937_64& rng);

/// Identity weights and zero biases; requires input, hidden and output
/// widths to match.
EncoderParams identity_params(const EncoderSpec& spec);

struct ForwardCache {
  Matrix input;
  std::vector<Matrix> hidden;  // activation after each layer
  Matrix raw;                  // head output, before normalization
  Matrix embedding;            // normalized rows
};

ForwardCache forward_cached(const EncoderParams& params,
                            const EncoderSpec& spec, const Matrix& inputs);

EmbeddingBatch forward(const EncoderParams& params, const EncoderSpec& spec,
                       const Matrix& inputs);

/// Layer index (1-based) closing each of `parts` consecutive parts:
/// ceil(k · num_layers / parts) for k = 1..parts. Throws BadParts.
std::vector<std::size_t> part_boundaries(std::size_t num_layers,
                                         std::size_t parts);

/// Raw activation at part boundary `boundary`: the hidden activation for
/// inner boundaries, the pre-normalization head output for the last layer.
const Matrix& tap_at(const ForwardCache& cache, std::size_t boundary);

struct TappedForward {
  EmbeddingBatch embedding;
  std::vector<Matrix> taps;
};

TappedForward forward_with_taps(const EncoderParams& params,
                                const EncoderSpec& spec, const Matrix& inputs,
                                std::size_t parts);

/// Copies the teacher's first student_spec.num_layers layers and its head.
EncoderParams init_student_from_teacher(const EncoderParams& teacher,
                                        const EncoderSpec& student_spec);

struct EncoderGrads {
  std::vector<Dense> layers;
  Dense head;
  Matrix input;

  std::vector<const Matrix*> tensors() const;
};

/// Gradient injected at a part boundary (see tap_at).
struct TapGrad {
  std::size_t boundary;
  Matrix grad;
};

/// Reverse pass from a gradient on the pre-normalization output.
EncoderGrads backward_raw(const EncoderParams& params, const EncoderSpec& spec,
                          const ForwardCache& cache, const Matrix& grad_raw,
                          const std::vector<TapGrad>& taps = {});

/// Reverse pass from a gradient on the normalized embedding.
EncoderGrads backward(const EncoderParams& params, const EncoderSpec& spec,
                      const ForwardCache& cache, const Matrix& upstream,
                      const std::vector<TapGrad>& taps = {});

EncoderGrads backward(const EncoderParams& params, const EncoderSpec& spec,
                      const Matrix& inputs, const Matrix& upstream);

struct Encoder {
  EncoderSpec spec;
  EncoderParams params;
};

/// Teacher and student encoders for both modalities. Any subset may be
/// present (a teacher-only checkpoint has no students).
struct DualEncoderBundle {
  std::array<std::optional<Encoder>, kNumRoles> encoders;

  bool has(Role role) const noexcept {
    return encoders[static_cast<std::size_t>(role)].has_value();
  }
  Encoder& at(Role role);
  const Encoder& at(Role role) const;
  void set(Role role, Encoder encoder) {
    encoders[static_cast<std::size_t>(role)] = std::move(encoder);
  }
  /// Throws IncompatibleShapes unless every present encoder shares d.
  void check_output_dims() const;
};

nlohmann::json to_json(const EncoderSpec& spec);
EncoderSpec encoder_spec_from_json(const nlohmann::json& doc);

}  // namespace cona
