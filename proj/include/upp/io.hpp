#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "upp/device.hpp"
#include "upp/program.hpp"

namespace upp {

inline constexpr int kFileSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

/// Writes through a temporary sibling and renames it into place.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << text;
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

/// Exclusive advisory lock on `<path>.lock`, held for the object's lifetime.
/// Fails instead of blocking when another process holds it.
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) : lock_path_(path.string() + ".lock") {
    fd_ = ::open(lock_path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock " + lock_path_ + ": " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      const int err = errno;
      ::close(fd_);
      fd_ = -1;
      throw IoError(err == EWOULDBLOCK ? path.string() + " is locked by another process"
                                       : "cannot lock " + lock_path_ + ": " + std::strerror(err));
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  std::string lock_path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string format_double(double x) {
  if (std::isnan(x)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(where + ": bad number '" + s + "'");
  }
}

}  // namespace detail

/// One row per record: seq, P_0..P_{H-1} (mW), A_i_j (output i, input j).
inline std::string measurements_to_csv(const std::vector<MeasurementRecord>& records, int n_modes, int n_heaters) {
  std::ostringstream out;
  out << "seq";
  for (int h = 0; h < n_heaters; ++h) out << ",P_" << h;
  for (int i = 0; i < n_modes; ++i) {
    for (int j = 0; j < n_modes; ++j) out << ",A_" << i << '_' << j;
  }
  out << '\n';
  for (const auto& rec : records) {
    detail::require(rec.powers.size() == n_heaters && rec.amplitudes.rows() == n_modes &&
                        rec.amplitudes.cols() == n_modes,
                    "measurements_to_csv: record shape mismatch");
    out << rec.seq;
    for (int h = 0; h < n_heaters; ++h) out << ',' << detail::format_double(rec.powers(h));
    for (int i = 0; i < n_modes; ++i) {
      for (int j = 0; j < n_modes; ++j) out << ',' << detail::format_double(rec.amplitudes(i, j));
    }
    out << '\n';
  }
  return out.str();
}

inline std::vector<MeasurementRecord> measurements_from_csv(const std::string& text, int n_modes, int n_heaters) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("measurement csv: empty file");
  const auto header = detail::split_csv_line(line);
  const std::size_t width = 1 + static_cast<std::size_t>(n_heaters) + static_cast<std::size_t>(n_modes) * n_modes;
  if (header.size() != width || header[0] != "seq" || (n_heaters > 0 && header[1] != "P_0")) {
    throw ConfigError("measurement csv: header does not match a " + std::to_string(n_modes) + "-mode, " +
                      std::to_string(n_heaters) + "-heater device");
  }
  std::vector<MeasurementRecord> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = "measurement csv row " + std::to_string(row);
    if (cells.size() != width) throw ConfigError(where + ": expected " + std::to_string(width) + " columns");
    MeasurementRecord rec;
    rec.seq = static_cast<std::int64_t>(detail::parse_double(cells[0], where));
    rec.powers.resize(n_heaters);
    for (int h = 0; h < n_heaters; ++h) rec.powers(h) = detail::parse_double(cells[1 + h], where);
    rec.amplitudes.resize(n_modes, n_modes);
    std::size_t k = 1 + static_cast<std::size_t>(n_heaters);
    for (int i = 0; i < n_modes; ++i) {
      for (int j = 0; j < n_modes; ++j) {
        const double a = detail::parse_double(cells[k++], where);
        if (!(a >= 0.0)) throw ConfigError(where + ": negative amplitude");
        rec.amplitudes(i, j) = a;
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// target_id, fidelity, total_power_mw, status; failed targets leave the
/// numeric fields empty.
inline std::string campaign_to_csv(const CampaignReport& report) {
  std::ostringstream out;
  out << "target_id,fidelity,total_power_mw,status\n";
  for (const auto& r : report.rows) {
    out << r.target_id << ',' << detail::format_double(r.fidelity) << ',' << detail::format_double(r.total_power_mw)
        << ',' << r.status << '\n';
  }
  return out.str();
}

inline constexpr double kReferenceFidelity = 0.997;

inline nlohmann::json campaign_summary_json(const CampaignReport& report, const std::string& layout_hash,
                                            const std::string& targets) {
  const auto& f = report.fidelity;
  return {{"schema_version", kFileSchemaVersion},
          {"kind", "upp-campaign-summary"},
          {"layout_hash", layout_hash},
          {"targets", targets},
          {"count", report.rows.size()},
          {"failures", report.failures},
          {"fidelity", {{"mean", f.mean}, {"min", f.min}, {"max", f.max}, {"stddev", f.stddev},
                        {"reference", kReferenceFidelity}}},
          {"power_mw", {{"mean", report.mean_power_mw},
                        {"min", report.min_power_mw},
                        {"max", report.max_power_mw},
                        {"reference", report.power_reference_mw},
                        {"below_reference", report.below_reference}}},
          {"max_phase_residual_rad", report.max_phase_residual}};
}

// ---------------------------------------------------------------------------
// Device files
//
// The ground truth sits in a sealed section: the JSON text XOR-ed with a
// fixed keystream and hex encoded. It keeps calibration code from reading
// it by accident; it is not protection.

namespace detail {

inline std::string seal_bytes(const std::string& bytes) {
  Rng key(0x7570702d7365616cULL);
  std::string out = bytes;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<char>(static_cast<unsigned char>(out[i]) ^ static_cast<unsigned char>(key.next_u64()));
  }
  return out;
}

inline std::string to_hex(const std::string& bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 15]);
  }
  return out;
}

inline std::string from_hex(const std::string& hex) {
  if (hex.size() % 2 != 0) throw ConfigError("device file: corrupt sealed section");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw ConfigError("device file: corrupt sealed section");
  };
  std::string out(hex.size() / 2, '\0');
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<char>(nibble(hex[2 * i]) * 16 + nibble(hex[2 * i + 1]));
  }
  return out;
}

}  // namespace detail

inline nlohmann::json device_to_json(const DeviceGroundTruth& truth) {
  const MeshLayout pub = truth.layout.ideal();
  return {{"schema_version", kFileSchemaVersion},
          {"kind", "upp-device"},
          {"layout_hash", pub.topology_hash()},
          {"rng", std::string(Rng::kAlgorithm)},
          {"public", {{"n_modes", pub.n_modes()},
                      {"mzis", pub.node_count()},
                      {"couplers", pub.coupler_count()},
                      {"heaters", pub.heater_count()},
                      {"max_power_mw", truth.thermal.max_power()},
                      {"layout", layout_to_json(pub)}}},
          {"sealed", {{"encoding", "xor-hex-v1"},
                      {"payload", detail::to_hex(detail::seal_bytes(truth_to_json(truth).dump()))}}}};
}

/// Public part of a device file: what calibration may know.
inline MeshLayout device_public_layout(const nlohmann::json& j) {
  try {
    detail::require(j.at("schema_version").get<int>() == kFileSchemaVersion, "device file: unsupported schema version");
    detail::require(j.at("kind").get<std::string>() == "upp-device", "device file: wrong kind");
    MeshLayout layout = layout_from_json(j.at("public").at("layout"));
    detail::require(layout.topology_hash() == j.at("layout_hash").get<std::string>(),
                    "device file: layout hash mismatch");
    return layout;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("device file: ") + e.what());
  }
}

inline DeviceGroundTruth device_from_json(const nlohmann::json& j) {
  const MeshLayout pub = device_public_layout(j);
  try {
    const auto& sealed = j.at("sealed");
    detail::require(sealed.at("encoding").get<std::string>() == "xor-hex-v1", "device file: unknown sealed encoding");
    const std::string text = detail::seal_bytes(detail::from_hex(sealed.at("payload").get<std::string>()));
    DeviceGroundTruth truth = truth_from_json(nlohmann::json::parse(text));
    detail::require(truth.layout.topology_hash() == pub.topology_hash(), "device file: sealed layout does not match");
    return truth;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("device file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Target lists

inline nlohmann::json targets_to_json(const std::vector<Unitary>& targets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& u : targets) arr.push_back(matrix_to_json(u.matrix()));
  return {{"schema_version", kFileSchemaVersion}, {"kind", "upp-targets"}, {"targets", arr}};
}

inline std::vector<Unitary> targets_from_json(const nlohmann::json& j) {
  try {
    const auto& arr = j.at("targets");
    std::vector<Unitary> out;
    for (const auto& m : arr) out.emplace_back(matrix_from_json(m));
    if (out.empty()) throw ConfigError("targets file: no targets");
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("targets file: ") + e.what());
  }
}

}  // namespace upp
