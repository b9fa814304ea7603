#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cona/encoder.hpp"
#include "cona/matrix.hpp"

namespace cona::io {

inline constexpr int kFormatVersion = 1;

/// On-disk layout shared by checkpoints, datasets and indexes:
///
///   8 bytes   magic "CONABIN\0"
///   u64 LE    header length H
///   H bytes   UTF-8 JSON header
///   [ids]     present when header has "id_count": per id, u32 LE length
///             followed by that many bytes
///   blocks    little-endian IEEE-754 doubles, one block per entry of
///             header["blocks"] ({"name", "rows", "cols"}), in order
struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::string> ids;
  std::vector<std::string> block_names;
  std::vector<Matrix> blocks;

  void add_block(std::string name, Matrix m);
  const Matrix& block(std::string_view name) const;
};

std::vector<std::uint8_t> encode(const Container& c);
Container decode(std::span<const std::uint8_t> bytes);

/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_container(const std::filesystem::path& path, const Container& c);
/// Checks the header's "kind" when `expected_kind` is non-empty.
Container load_container(const std::filesystem::path& path,
                         std::string_view expected_kind = {});

/// Bundle checkpoint: header {"kind": "bundle", "format_version", "encoders":
/// [{"role", "spec", "frozen", "blocks": [...]}]}; blocks in role order then
/// declaration order.
Container bundle_to_container(const DualEncoderBundle& bundle);
DualEncoderBundle bundle_from_container(const Container& c);

void save_bundle(const std::filesystem::path& path,
                 const DualEncoderBundle& bundle);
DualEncoderBundle load_bundle(const std::filesystem::path& path);

}  // namespace cona::io
