#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmscan/patching.hpp"
#include "vmscan/tensor.hpp"

namespace vmscan {

// ---- line-based config: [section] + key = value -------------------------

class Config {
 public:
  static Config parse(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line, section;
    long lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::string s = trim(line);
      if (s.empty() || s[0] == '#') continue;
      if (s.front() == '[' && s.back() == ']') {
        section = trim(s.substr(1, s.size() - 2));
        cfg.sections_[section];
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected key = value, got: " + s);
      cfg.sections_[section][trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
    }
    return cfg;
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    return parse(buf.str());
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  long get_long(const std::string& section, const std::string& key, long fallback) const {
    const std::string v = get(section, key, "");
    return v.empty() ? fallback : std::stol(v);
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    const std::string v = get(section, key, "");
    return v.empty() ? fallback : std::stod(v);
  }

  std::vector<long> get_longs(const std::string& section, const std::string& key,
                              std::vector<long> fallback) const {
    const std::string v = get(section, key, "");
    if (v.empty()) return fallback;
    std::vector<long> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stol(trim(item)));
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [section, kv] : sections_) {
      out += "[" + section + "]\n";
      for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
      out += "\n";
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
};

// ---- binary PPM (P6) / PGM (P5) ------------------------------------------

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  if (img.channels != 3) throw std::invalid_argument("write_ppm: expects 3 channels");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<size_t>(img.height * img.width * 3));
  for (long i = 0; i < img.pixels.size(); ++i) {
    double v = std::clamp(img.pixels[i], 0.0, 1.0);
    bytes[static_cast<size_t>(i)] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

namespace detail {
inline void skip_pnm_whitespace(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string comment;
      std::getline(is, comment);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}

inline long read_pnm_int(std::istream& is) {
  skip_pnm_whitespace(is);
  long v = 0;
  if (!(is >> v)) throw std::runtime_error("pnm: malformed header");
  return v;
}
}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: not a binary PPM: " + path);
  const long w = detail::read_pnm_int(is);
  const long h = detail::read_pnm_int(is);
  const long maxv = detail::read_pnm_int(is);
  if (maxv != 255) throw std::runtime_error("read_ppm: only 8-bit supported");
  is.get();  // single whitespace after header
  Image img;
  img.width = w;
  img.height = h;
  img.channels = 3;
  img.pixels = Tensor({h * w, 3});
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w * 3));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error("read_ppm: truncated pixel data");
  for (long i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<double>(bytes[static_cast<size_t>(i)]) / 255.0;
  return img;
}

/// Masks: pixel value = class id.
inline void write_pgm(const std::string& path, const std::vector<int>& mask, long h, long w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  if (static_cast<long>(mask.size()) != h * w)
    throw std::invalid_argument("write_pgm: mask size mismatch");
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] > 255) throw std::invalid_argument("write_pgm: class id > 255");
    bytes[i] = static_cast<unsigned char>(mask[i]);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<int> read_pgm(const std::string& path, long* h_out, long* w_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path);
  const long w = detail::read_pnm_int(is);
  const long h = detail::read_pnm_int(is);
  const long maxv = detail::read_pnm_int(is);
  if (maxv != 255) throw std::runtime_error("read_pgm: only 8-bit supported");
  is.get();
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error("read_pgm: truncated pixel data");
  std::vector<int> mask(bytes.begin(), bytes.end());
  if (h_out) *h_out = h;
  if (w_out) *w_out = w;
  return mask;
}

// ---- RFC-4180 CSV and a Markdown mirror -----------------------------------

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    quoted += c;
    if (c == '"') quoted += '"';
  }
  return quoted + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ",";
    out += csv_field(fields[i]);
  }
  return out + "\r\n";
}

inline std::string markdown_table(const std::vector<std::string>& header,
                                  const std::vector<std::vector<std::string>>& rows) {
  auto line = [](const std::vector<std::string>& cells) {
    std::string out = "|";
    for (const auto& c : cells) out += " " + c + " |";
    return out + "\n";
  };
  std::string out = line(header);
  std::vector<std::string> rule(header.size(), "---");
  out += line(rule);
  for (const auto& r : rows) out += line(r);
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << text;
}

inline std::string format_double(double v, int precision = 4) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(precision);
  ss << v;
  return ss.str();
}

}  // namespace vmscan
