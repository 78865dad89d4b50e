#include "ctsynth/volume_io.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include "json.hpp"

#include "ctsynth/errors.hpp"

namespace ctsynth {

namespace fs = std::filesystem;

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;
constexpr const char* kDomainTag = "ctsynth domain=";

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 quaternion_affine(const Nifti1Header& h) {
  const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
  const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
  const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  const Mat3 r{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}}};
  const std::array<double, 3> scale{h.pixdim[1], h.pixdim[2], h.pixdim[3] * qfac};
  Mat3 m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = r[i][j] * scale[j];
  return m;
}

Mat3 header_affine(const Nifti1Header& h) {
  if (h.sform_code > 0) {
    return Mat3{{{h.srow_x[0], h.srow_x[1], h.srow_x[2]},
                 {h.srow_y[0], h.srow_y[1], h.srow_y[2]},
                 {h.srow_z[0], h.srow_z[1], h.srow_z[2]}}};
  }
  if (h.qform_code > 0) return quaternion_affine(h);
  return Mat3{{{h.pixdim[1], 0, 0}, {0, h.pixdim[2], 0}, {0, 0, h.pixdim[3]}}};
}

template <typename T>
void convert_samples(const std::vector<char>& bytes, std::vector<double>& out) {
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    T value;
    std::memcpy(&value, bytes.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<double>(value);
  }
}

}  // namespace

CtVolume read_nifti(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open volume " + path.string());
  Nifti1Header h{};
  in.read(reinterpret_cast<char*>(&h), sizeof(h));
  if (!in || h.sizeof_hdr != 348) {
    throw ValidationError(path.string() + ": not a little-endian NIfTI-1 file");
  }
  if (std::strncmp(h.magic, "n+1", 3) != 0) {
    throw ValidationError(path.string() + ": only single-file NIfTI (n+1) is supported");
  }
  if (h.dim[0] < 3) throw ShapeError(path.string() + ": volume has fewer than 3 dimensions");
  for (int i = 4; i <= h.dim[0] && i < 8; ++i) {
    if (h.dim[i] > 1) throw ShapeError(path.string() + ": only 3D volumes are supported");
  }
  const std::array<std::size_t, 3> file_dims{static_cast<std::size_t>(h.dim[1]),
                                             static_cast<std::size_t>(h.dim[2]),
                                             static_cast<std::size_t>(h.dim[3])};
  const std::size_t count = file_dims[0] * file_dims[1] * file_dims[2];
  std::size_t bytes_per = 0;
  switch (h.datatype) {
    case kDtUint8: bytes_per = 1; break;
    case kDtInt16: bytes_per = 2; break;
    case kDtInt32: bytes_per = 4; break;
    case kDtFloat32: bytes_per = 4; break;
    case kDtFloat64: bytes_per = 8; break;
    default: throw ValidationError(path.string() + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  std::vector<char> bytes(count * bytes_per);
  in.seekg(static_cast<std::streamoff>(h.vox_offset));
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw ValidationError(path.string() + ": truncated voxel data");

  std::vector<double> samples(count);
  switch (h.datatype) {
    case kDtUint8: convert_samples<std::uint8_t>(bytes, samples); break;
    case kDtInt16: convert_samples<std::int16_t>(bytes, samples); break;
    case kDtInt32: convert_samples<std::int32_t>(bytes, samples); break;
    case kDtFloat32: convert_samples<float>(bytes, samples); break;
    default: convert_samples<double>(bytes, samples); break;
  }
  if (h.scl_slope != 0.0F && std::isfinite(h.scl_slope)) {
    for (double& s : samples) s = s * h.scl_slope + h.scl_inter;
  }

  // Map each file axis onto the world axis it is most aligned with, flipping where the
  // direction is negative, so data always lands in RAS order.
  const Mat3 affine = header_affine(h);
  std::array<int, 3> world_of{-1, -1, -1};
  std::array<bool, 3> flip{};
  std::array<double, 3> axis_len{};
  std::array<bool, 3> taken{};
  for (int j = 0; j < 3; ++j) {
    int best = -1;
    double best_mag = -1;
    for (int i = 0; i < 3; ++i) {
      if (taken[i]) continue;
      if (std::abs(affine[i][j]) > best_mag) {
        best_mag = std::abs(affine[i][j]);
        best = i;
      }
    }
    taken[best] = true;
    world_of[j] = best;
    flip[j] = affine[best][j] < 0;
    axis_len[j] = std::sqrt(affine[0][j] * affine[0][j] + affine[1][j] * affine[1][j] +
                            affine[2][j] * affine[2][j]);
    if (!(axis_len[j] > 0)) axis_len[j] = std::abs(h.pixdim[j + 1]) > 0 ? std::abs(h.pixdim[j + 1]) : 1.0;
  }
  std::array<std::size_t, 3> out_extent{};
  Spacing spacing{};
  for (int j = 0; j < 3; ++j) {
    out_extent[world_of[j]] = file_dims[j];
    spacing[world_of[j]] = axis_len[j];
  }
  const Dims dims{out_extent[0], out_extent[1], out_extent[2]};

  IntensityDomain domain = IntensityDomain::HU;
  const std::string descrip(h.descrip, strnlen(h.descrip, sizeof(h.descrip)));
  if (auto pos = descrip.find(kDomainTag); pos != std::string::npos) {
    domain = intensity_domain_from_string(descrip.substr(pos + std::strlen(kDomainTag)));
  }

  CtVolume v(dims, spacing, domain);
  auto data = v.data();
  for (std::size_t k = 0; k < file_dims[2]; ++k) {
    for (std::size_t j = 0; j < file_dims[1]; ++j) {
      for (std::size_t i = 0; i < file_dims[0]; ++i) {
        const std::array<std::size_t, 3> file_idx{i, j, k};
        std::array<std::size_t, 3> out_idx{};
        for (int a = 0; a < 3; ++a) {
          out_idx[world_of[a]] = flip[a] ? file_dims[a] - 1 - file_idx[a] : file_idx[a];
        }
        data[v.index(out_idx[0], out_idx[1], out_idx[2])] =
            static_cast<float>(samples[i + file_dims[0] * (j + file_dims[1] * k)]);
      }
    }
  }
  return v;
}

void write_nifti(const fs::path& path, const CtVolume& v) {
  const Dims& d = v.dims();
  const Spacing& s = v.spacing_mm();
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(d.x);
  h.dim[2] = static_cast<std::int16_t>(d.y);
  h.dim[3] = static_cast<std::int16_t>(d.z);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = kDtFloat32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0F;
  h.pixdim[1] = static_cast<float>(s[0]);
  h.pixdim[2] = static_cast<float>(s[1]);
  h.pixdim[3] = static_cast<float>(s[2]);
  h.vox_offset = 352.0F;
  h.scl_slope = 1.0F;
  h.xyzt_units = 2;  // millimetres
  const std::string descrip = std::string(kDomainTag) + to_string(v.domain());
  std::strncpy(h.descrip, descrip.c_str(), sizeof(h.descrip) - 1);
  h.qform_code = 1;
  h.sform_code = 1;
  h.srow_x[0] = static_cast<float>(s[0]);
  h.srow_y[1] = static_cast<float>(s[1]);
  h.srow_z[2] = static_cast<float>(s[2]);
  std::memcpy(h.magic, "n+1\0", 4);

  std::vector<float> file_order(d.voxels());
  for (std::size_t k = 0; k < d.z; ++k)
    for (std::size_t j = 0; j < d.y; ++j)
      for (std::size_t i = 0; i < d.x; ++i) file_order[i + d.x * (j + d.y * k)] = v.at(i, j, k);

  write_atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write volume " + path.string());
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const std::array<char, 4> extension{};
    out.write(extension.data(), extension.size());
    out.write(reinterpret_cast<const char*>(file_order.data()),
              static_cast<std::streamsize>(file_order.size() * sizeof(float)));
    if (!out) throw ValidationError("short write on " + path.string());
  });
}

namespace {
fs::path sidecar_path(const fs::path& raw) {
  auto p = raw;
  p += ".json";
  return p;
}
}  // namespace

CtVolume read_raw(const fs::path& path) {
  std::ifstream side(sidecar_path(path));
  if (!side) throw ValidationError("missing sidecar header " + sidecar_path(path).string());
  nlohmann::json header;
  try {
    side >> header;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(sidecar_path(path).string() + ": " + e.what());
  }
  for (const char* key : {"shape", "spacing_mm", "domain", "dtype"}) {
    if (!header.contains(key)) throw ValidationError(sidecar_path(path).string() + ": missing field '" + key + "'");
  }
  if (header["dtype"] != "float32") throw ValidationError("raw volumes must be float32");
  if (header.value("orientation", std::string(kCanonicalOrientation)) != kCanonicalOrientation) {
    throw ValidationError("raw volumes must be stored in RAS order");
  }
  const auto shape = header["shape"].get<std::array<std::size_t, 3>>();
  const auto spacing = header["spacing_mm"].get<Spacing>();
  const Dims dims{shape[0], shape[1], shape[2]};
  std::vector<float> data(dims.voxels());
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw ValidationError(path.string() + ": truncated voxel data");
  return CtVolume(dims, spacing, intensity_domain_from_string(header["domain"]), std::move(data));
}

void write_raw(const fs::path& path, const CtVolume& v) {
  nlohmann::json header{{"shape", {v.dims().x, v.dims().y, v.dims().z}},
                        {"spacing_mm", v.spacing_mm()},
                        {"domain", to_string(v.domain())},
                        {"dtype", "float32"},
                        {"layout", "z-fastest"},
                        {"orientation", v.orientation()}};
  write_atomically(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(v.data().data()),
              static_cast<std::streamsize>(v.data().size() * sizeof(float)));
    if (!out) throw ValidationError("short write on " + path.string());
  });
  write_atomically(sidecar_path(path), [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::trunc);
    out << header.dump(2) << "\n";
  });
}

CtVolume read_volume(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".nii") return read_nifti(path);
  if (ext == ".raw") return read_raw(path);
  throw ValidationError("unsupported volume extension '" + ext + "' for " + path.string());
}

void write_volume(const fs::path& path, const CtVolume& v) {
  const auto ext = path.extension().string();
  if (ext == ".nii") return write_nifti(path, v);
  if (ext == ".raw") return write_raw(path, v);
  throw ValidationError("unsupported volume extension '" + ext + "' for " + path.string());
}

}  // namespace ctsynth
