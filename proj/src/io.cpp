#include "cona/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cona/error.hpp"

namespace cona::io {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'N', 'A', 'B', 'I', 'N', '\0'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(
        (static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

void put_double(std::vector<std::uint8_t>& out, double v) {
  put_le(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  double get_double() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::FormatError, "truncated file");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Container::add_block(std::string name, Matrix m) {
  block_names.push_back(std::move(name));
  blocks.push_back(std::move(m));
}

const Matrix& Container::block(std::string_view name) const {
  for (std::size_t i = 0; i < block_names.size(); ++i) {
    if (block_names[i] == name) return blocks[i];
  }
  fail(ErrorKind::FormatError, "missing block '" + std::string(name) + "'");
}

std::vector<std::uint8_t> encode(const Container& c) {
  nlohmann::json header = c.header;
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t i = 0; i < c.blocks.size(); ++i) {
    blocks.push_back({{"name", c.block_names[i]},
                      {"rows", c.blocks[i].rows()},
                      {"cols", c.blocks[i].cols()}});
  }
  header["blocks"] = blocks;
  if (!c.ids.empty() || header.contains("id_count")) header["id_count"] = c.ids.size();
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const std::string& id : c.ids) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
  }
  for (const Matrix& m : c.blocks) {
    for (double v : m.values()) put_double(out, v);
  }
  return out;
}

Container decode(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  if (in.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    fail(ErrorKind::FormatError, "bad magic: not a cona container");
  }
  const auto header_len = in.get_le<std::uint64_t>();
  Container c;
  try {
    c.header = nlohmann::json::parse(in.get_string(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::FormatError, std::string("bad header: ") + e.what());
  }
  if (!c.header.is_object()) fail(ErrorKind::FormatError, "header is not an object");
  if (c.header.value("format_version", 0) != kFormatVersion) {
    fail(ErrorKind::FormatError, "unsupported format_version");
  }
  try {
    const std::size_t id_count = c.header.value("id_count", std::size_t{0});
    for (std::size_t i = 0; i < id_count; ++i) {
      c.ids.push_back(in.get_string(in.get_le<std::uint32_t>()));
    }
    for (const auto& b : c.header.at("blocks")) {
      const auto rows = b.at("rows").get<std::size_t>();
      const auto cols = b.at("cols").get<std::size_t>();
      std::vector<double> data(rows * cols);
      for (double& v : data) v = in.get_double();
      c.add_block(b.at("name").get<std::string>(), Matrix(rows, cols, std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::FormatError, std::string("bad header: ") + e.what());
  }
  if (!in.at_end()) fail(ErrorKind::FormatError, "trailing bytes after last block");
  c.header.erase("blocks");
  c.header.erase("id_count");
  return c;
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::IoError, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::IoError, "rename to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode(c));
}

Container load_container(const std::filesystem::path& path,
                         std::string_view expected_kind) {
  Container c = decode(read_file(path));
  if (!expected_kind.empty() && c.header.value("kind", "") != expected_kind) {
    fail(ErrorKind::FormatError, path.string() + " is not a " +
                                     std::string(expected_kind) + " file");
  }
  return c;
}

Container bundle_to_container(const DualEncoderBundle& bundle) {
  Container c;
  c.header["kind"] = "bundle";
  c.header["format_version"] = kFormatVersion;
  nlohmann::json encoders = nlohmann::json::array();
  for (std::size_t r = 0; r < kNumRoles; ++r) {
    const auto role = static_cast<Role>(r);
    if (!bundle.has(role)) continue;
    const Encoder& e = bundle.at(role);
    const std::string prefix(to_string(role));
    nlohmann::json names = nlohmann::json::array();
    auto add = [&](const std::string& name, const Matrix& m) {
      c.add_block(prefix + "." + name, m);
      names.push_back(prefix + "." + name);
    };
    for (std::size_t l = 0; l < e.params.layers.size(); ++l) {
      add("layer" + std::to_string(l + 1) + ".weight", e.params.layers[l].weight);
      add("layer" + std::to_string(l + 1) + ".bias", e.params.layers[l].bias);
    }
    add("head.weight", e.params.head.weight);
    add("head.bias", e.params.head.bias);
    encoders.push_back({{"role", prefix},
                        {"spec", to_json(e.spec)},
                        {"frozen", e.params.frozen},
                        {"blocks", names}});
  }
  c.header["encoders"] = encoders;
  return c;
}

DualEncoderBundle bundle_from_container(const Container& c) {
  if (c.header.value("kind", "") != "bundle") {
    fail(ErrorKind::FormatError, "container is not a bundle checkpoint");
  }
  DualEncoderBundle bundle;
  try {
    for (const auto& entry : c.header.at("encoders")) {
      const auto role_name = entry.at("role").get<std::string>();
      std::optional<Role> role;
      for (std::size_t r = 0; r < kNumRoles; ++r) {
        if (to_string(static_cast<Role>(r)) == role_name) role = static_cast<Role>(r);
      }
      if (!role) fail(ErrorKind::FormatError, "unknown role '" + role_name + "'");
      Encoder e;
      e.spec = encoder_spec_from_json(entry.at("spec"));
      e.params.frozen = entry.at("frozen").get<bool>();
      for (std::size_t l = 1; l <= e.spec.num_layers; ++l) {
        const std::string p = role_name + ".layer" + std::to_string(l);
        e.params.layers.push_back({c.block(p + ".weight"), c.block(p + ".bias")});
      }
      e.params.head = {c.block(role_name + ".head.weight"),
                       c.block(role_name + ".head.bias")};
      try {
        check_params(e.params, e.spec);
      } catch (const Error& err) {
        fail(ErrorKind::FormatError, role_name + ": " + err.what());
      }
      bundle.set(*role, std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::FormatError, std::string("bad bundle header: ") + e.what());
  }
  return bundle;
}

void save_bundle(const std::filesystem::path& path,
                 const DualEncoderBundle& bundle) {
  save_container(path, bundle_to_container(bundle));
}

DualEncoderBundle load_bundle(const std::filesystem::path& path) {
  return bundle_from_container(load_container(path, "bundle"));
}

}  // namespace cona::io
