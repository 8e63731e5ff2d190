#pragma once

// Line-oriented text format for scalar fields on uniform node-centered grids.
//
// Layout:
//   line 1:  metalens-grid 1 <nx> <ny> <x0> <y0> <hx> <hy> <quantity>
//   then:    nx*ny values, row-major (j outer, i inner), one grid row per line
//
// Floating-point fields are written with the shortest decimal representation
// that round-trips, so write -> read reproduces every finite double exactly,
// including negative zero and denormals. The quantity name is a single
// whitespace-free token identifying what the values are (e.g. "phase").

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>

#include "metalens/error.hpp"
#include "metalens/grid.hpp"

namespace metalens {

/// A scalar field together with the name of the quantity it stores.
struct NamedField {
  ScalarField field;
  std::string quantity;
};

namespace detail {

inline constexpr std::string_view kGridMagic = "metalens-grid";
inline constexpr int kGridVersion = 1;

inline void append_double(std::string& out, double v) {
  char buf[64];
  const std::to_chars_result r = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, r.ptr);
}

/// Pulls the next whitespace-separated token out of `text` starting at `pos`.
/// Returns an empty view when the input is exhausted.
inline std::string_view next_token(std::string_view text, std::size_t& pos) {
  while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t' || text[pos] == '\n' ||
                               text[pos] == '\r'))
    ++pos;
  const std::size_t start = pos;
  while (pos < text.size() && text[pos] != ' ' && text[pos] != '\t' && text[pos] != '\n' &&
         text[pos] != '\r')
    ++pos;
  return text.substr(start, pos - start);
}

inline double parse_double_token(std::string_view token, const char* what) {
  double v = 0.0;
  const char* last = token.data() + token.size();
  const std::from_chars_result r = std::from_chars(token.data(), last, v);
  if (r.ec != std::errc() || r.ptr != last)
    throw_error(ErrorCode::format_error,
                std::string("grid file: cannot parse ") + what + " from '" +
                    std::string(token) + "'");
  return v;
}

inline long parse_int_token(std::string_view token, const char* what) {
  long v = 0;
  const char* last = token.data() + token.size();
  const std::from_chars_result r = std::from_chars(token.data(), last, v);
  if (r.ec != std::errc() || r.ptr != last)
    throw_error(ErrorCode::format_error,
                std::string("grid file: cannot parse ") + what + " from '" +
                    std::string(token) + "'");
  return v;
}

}  // namespace detail

/// Serializes a field to the grid-file text format.
inline std::string format_grid(const ScalarField& field, const std::string& quantity) {
  if (field.grid.nx <= 0 || field.grid.ny <= 0 || field.grid.size() != field.v.size())
    throw_error(ErrorCode::format_error, "grid file: field has no consistent grid");
  if (!(field.grid.hx > 0.0) || !(field.grid.hy > 0.0))
    throw_error(ErrorCode::format_error, "grid file: grid spacing must be positive");
  if (quantity.empty() || quantity.find_first_of(" \t\r\n") != std::string::npos)
    throw_error(ErrorCode::format_error,
                "grid file: quantity name must be a single non-empty token");

  std::string out;
  out.reserve(field.v.size() * 18 + 64);
  out.append(detail::kGridMagic);
  out.push_back(' ');
  out.append(std::to_string(detail::kGridVersion));
  out.push_back(' ');
  out.append(std::to_string(field.grid.nx));
  out.push_back(' ');
  out.append(std::to_string(field.grid.ny));
  out.push_back(' ');
  detail::append_double(out, field.grid.x0);
  out.push_back(' ');
  detail::append_double(out, field.grid.y0);
  out.push_back(' ');
  detail::append_double(out, field.grid.hx);
  out.push_back(' ');
  detail::append_double(out, field.grid.hy);
  out.push_back(' ');
  out.append(quantity);
  out.push_back('\n');
  for (int j = 0; j < field.grid.ny; ++j) {
    for (int i = 0; i < field.grid.nx; ++i) {
      if (i > 0) out.push_back(' ');
      detail::append_double(out, field.v[field.grid.idx(i, j)]);
    }
    out.push_back('\n');
  }
  return out;
}

/// Parses grid-file text back into the field it encodes.
inline NamedField parse_grid(std::string_view text) {
  std::size_t pos = 0;
  const std::string_view magic = detail::next_token(text, pos);
  if (magic != detail::kGridMagic)
    throw_error(ErrorCode::format_error,
                "grid file: expected format tag 'metalens-grid', got '" + std::string(magic) +
                    "'");
  const std::string_view version = detail::next_token(text, pos);
  if (version != "1")
    throw_error(ErrorCode::format_error,
                "grid file: unsupported version '" + std::string(version) +
                    "' (this reader understands version 1)");

  NamedField out;
  const long nx = detail::parse_int_token(detail::next_token(text, pos), "nx");
  const long ny = detail::parse_int_token(detail::next_token(text, pos), "ny");
  if (nx <= 0 || ny <= 0 || nx > 1 << 20 || ny > 1 << 20)
    throw_error(ErrorCode::format_error, "grid file: nx and ny must be in [1, 2^20]");
  out.field.grid.nx = static_cast<int>(nx);
  out.field.grid.ny = static_cast<int>(ny);
  out.field.grid.x0 = detail::parse_double_token(detail::next_token(text, pos), "x0");
  out.field.grid.y0 = detail::parse_double_token(detail::next_token(text, pos), "y0");
  out.field.grid.hx = detail::parse_double_token(detail::next_token(text, pos), "hx");
  out.field.grid.hy = detail::parse_double_token(detail::next_token(text, pos), "hy");
  if (!(out.field.grid.hx > 0.0) || !(out.field.grid.hy > 0.0))
    throw_error(ErrorCode::format_error, "grid file: grid spacing must be positive");
  const std::string_view quantity = detail::next_token(text, pos);
  if (quantity.empty())
    throw_error(ErrorCode::format_error, "grid file: header is missing the quantity name");
  out.quantity = std::string(quantity);

  const std::size_t expected = out.field.grid.size();
  out.field.v.reserve(expected);
  for (;;) {
    const std::string_view token = detail::next_token(text, pos);
    if (token.empty()) break;
    if (out.field.v.size() == expected)
      throw_error(ErrorCode::format_error,
                  "grid file: expected " + std::to_string(expected) +
                      " values, found more (first extra token '" + std::string(token) + "')");
    out.field.v.push_back(detail::parse_double_token(token, "value"));
  }
  if (out.field.v.size() != expected)
    throw_error(ErrorCode::format_error,
                "grid file: expected " + std::to_string(expected) + " values, found " +
                    std::to_string(out.field.v.size()));
  return out;
}

/// Writes a field to disk in the grid-file format.
inline void write_grid(const std::filesystem::path& path, const ScalarField& field,
                       const std::string& quantity) {
  const std::string text = format_grid(field, quantity);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw_error(ErrorCode::format_error,
                "grid file: cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out)
    throw_error(ErrorCode::format_error, "grid file: write to '" + path.string() + "' failed");
}

/// Reads a field back from disk.
inline NamedField read_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw_error(ErrorCode::format_error,
                "grid file: cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_grid(buf.str());
}

}  // namespace metalens
