#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include "spanmatch/error.hpp"
#include "spanmatch/parameters.hpp"

namespace spanmatch {

// Layout: "ESDM1", then d_w, d, d_ff, L as little-endian u64, a u64 byte
// count and that many bytes of config JSON, then every parameter matrix in
// Parameters::named() order as little-endian float64, row-major.
inline constexpr char kModelMagic[] = "ESDM1";

struct ModelFile {
  ModelConfig config;
  Parameters params;
  nlohmann::json meta = nlohmann::json::object();  // free-form provenance echoed into the file
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw UserError(std::string("model file truncated in ") + what);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

inline void save_model(std::ostream& out, const ModelFile& m) {
  check_shapes(m.params, m.config);
  out.write(kModelMagic, 5);
  detail::put_u64(out, m.config.d_w);
  detail::put_u64(out, m.config.d);
  detail::put_u64(out, m.config.ffn_width());
  detail::put_u64(out, m.config.max_span_len);
  const std::string echo = nlohmann::json{{"model", m.config}, {"meta", m.meta}}.dump();
  detail::put_u64(out, echo.size());
  out.write(echo.data(), static_cast<std::streamsize>(echo.size()));
  for (const auto& [name, mat] : m.params.named())
    for (double v : mat->values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw UserError("failed writing model file");
}

inline void save_model(const std::string& path, const ModelFile& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot open '" + path + "' for writing");
  save_model(out, m);
}

inline ModelFile load_model(std::istream& in) {
  char magic[5];
  if (!in.read(magic, 5) || std::string(magic, 5) != kModelMagic) throw UserError("not a model file (bad magic)");
  const std::uint64_t d_w = detail::get_u64(in, "dims");
  const std::uint64_t d = detail::get_u64(in, "dims");
  const std::uint64_t d_ff = detail::get_u64(in, "dims");
  const std::uint64_t max_len = detail::get_u64(in, "dims");
  const std::uint64_t echo_len = detail::get_u64(in, "config");
  if (echo_len > (1u << 24)) throw UserError("model file config block is implausibly large");
  std::string echo(echo_len, '\0');
  if (!in.read(echo.data(), static_cast<std::streamsize>(echo_len))) throw UserError("model file truncated in config");

  ModelFile m;
  try {
    const auto j = nlohmann::json::parse(echo);
    m.config = j.at("model").get<ModelConfig>();
    m.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw UserError(std::string("model file config is malformed: ") + e.what());
  }
  if (m.config.d_w != d_w || m.config.d != d || m.config.ffn_width() != d_ff || m.config.max_span_len != max_len) {
    throw UserError("model file dims disagree with its config echo");
  }
  m.config.validate();
  m.params = init_parameters(m.config, 0);
  for (auto& [name, mat] : m.params.named())
    for (double& v : mat->values()) v = std::bit_cast<double>(detail::get_u64(in, "parameters"));
  if (in.peek() != std::char_traits<char>::eof()) throw UserError("model file has trailing bytes");
  return m;
}

inline ModelFile load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open model file '" + path + "'");
  return load_model(in);
}

}  // namespace spanmatch
