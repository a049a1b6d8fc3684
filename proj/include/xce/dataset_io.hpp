#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xce/channel.hpp"
#include "xce/common.hpp"

namespace xce::channel {

static_assert(std::endian::native == std::endian::little,
              "XCED/XCEW blocks are little-endian; big-endian hosts need byte swaps");

inline constexpr const char* kDatasetMagic = "XCED1\n";

namespace detail {

inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline double read_f64(std::istream& is, const std::string& what) {
  double v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw FormatError("dataset: truncated block while reading " + what);
  return v;
}

inline void write_cvec(std::ostream& os, const CVec& v) {
  for (const cplx& x : v) {
    write_f64(os, x.real());
    write_f64(os, x.imag());
  }
}

inline CVec read_cvec(std::istream& is, int m, const std::string& what) {
  CVec v(m);
  for (int i = 0; i < m; ++i) {
    double re = read_f64(is, what);
    double im = read_f64(is, what);
    v[i] = {re, im};
  }
  return v;
}

/// Writes to <path>.tmp then renames, so readers never see partial files.
template <typename Fn>
void atomic_write(const std::string& path, Fn&& body) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + tmp);
    body(os);
    os.flush();
    if (!os) throw FormatError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline nlohmann::json spec_to_json(const DatasetSpec& spec) {
  return {{"M", spec.array.M},
          {"wavelength", spec.array.wavelength},
          {"L", spec.L},
          {"L0", spec.L0},
          {"r_range", {spec.r_range.first, spec.r_range.second}},
          {"snr_range_db", {spec.snr_range_db.first, spec.snr_range_db.second}},
          {"n_samples", spec.n_samples},
          {"base_seed", spec.base_seed}};
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
  DatasetSpec spec{ArrayConfig(j.at("M").get<int>(), j.at("wavelength").get<double>())};
  spec.L = j.at("L").get<int>();
  spec.L0 = j.at("L0").get<int>();
  spec.r_range = {j.at("r_range").at(0).get<double>(), j.at("r_range").at(1).get<double>()};
  spec.snr_range_db = {j.at("snr_range_db").at(0).get<double>(),
                       j.at("snr_range_db").at(1).get<double>()};
  spec.n_samples = j.at("n_samples").get<size_t>();
  spec.base_seed = j.at("base_seed").get<uint64_t>();
  spec.validate();
  return spec;
}

inline void write_dataset(const std::string& path, const DatasetSpec& spec,
                          const std::vector<ChannelSample>& samples) {
  if (samples.size() != spec.n_samples)
    throw FormatError("write_dataset: spec announces " + std::to_string(spec.n_samples) +
                      " samples, got " + std::to_string(samples.size()));
  detail::atomic_write(path, [&](std::ostream& os) {
    os << kDatasetMagic;
    os << spec_to_json(spec).dump() << "\n";
    for (const auto& s : samples) {
      detail::write_f64(os, s.snr_linear);
      detail::write_cvec(os, s.h_true);
      detail::write_cvec(os, s.h_ls);
    }
  });
}

struct Dataset {
  DatasetSpec spec;
  std::vector<ChannelSample> samples;
};

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset: " + path);

  char magic[6];
  is.read(magic, 6);
  if (!is || std::string(magic, 6) != kDatasetMagic)
    throw FormatError("dataset: bad magic in " + path + " (expected XCED1)");

  std::string header;
  if (!std::getline(is, header)) throw FormatError("dataset: missing header line in " + path);
  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded()) throw FormatError("dataset: unparsable header in " + path);

  Dataset ds{spec_from_json(j), {}};
  const int m = ds.spec.array.M;
  ds.samples.resize(ds.spec.n_samples);
  for (size_t i = 0; i < ds.spec.n_samples; ++i) {
    ChannelSample& s = ds.samples[i];
    s.snr_linear = detail::read_f64(is, "snr_linear of sample " + std::to_string(i));
    if (!(s.snr_linear > 0))
      throw FormatError("dataset: non-positive snr_linear in sample " + std::to_string(i));
    s.h_true = detail::read_cvec(is, m, "h_true of sample " + std::to_string(i));
    s.h_ls = detail::read_cvec(is, m, "h_ls of sample " + std::to_string(i));
    s.seed = ds.spec.base_seed + i;
  }
  char extra;
  if (is.read(&extra, 1))
    throw FormatError("dataset: trailing bytes after last sample in " + path);
  return ds;
}

}  // namespace xce::channel
