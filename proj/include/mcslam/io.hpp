#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "mcslam/surfel_map.hpp"
#include "mcslam/trajectory.hpp"

namespace mcslam {

inline constexpr int kSurfelPlyVersion = 1;

/// Binary little-endian PLY, one vertex per surfel in id order:
///   float x y z nx ny nz radius; uchar red green blue;
///   float s00 s01 s02 s11 s12 s22 (centroid covariance, upper triangle);
///   float x00 x01 x02 x11 x12 x22 (scatter); float nu; uint obs_count;
///   float timestamp; float created; uchar stable; float colour_sigma;
///   float q00 q01 q02 q11 q12 q22 (founding beam noise).
/// Header comments carry the format version and the map radius. Reading
/// back gives the float32 (and 8-bit colour) values of every field, so a
/// second write is byte-identical to the first. Ids are renumbered 0..n-1.
void write_surfel_ply(std::ostream& os, const SurfelMap& map);
/// Throws kParse with the byte offset on malformed or truncated input.
SurfelMap read_surfel_ply(std::istream& is);

/// Same fields as the PLY in text, 17 significant digits, header
/// x,y,z,nx,ny,nz,radius,red,green,blue,s00,...,q22. Colours stay in [0, 1].
/// A map without rows reads back with the default radius.
void write_surfel_csv(std::ostream& os, const SurfelMap& map);
SurfelMap read_surfel_csv(std::istream& is);

/// level,count,timestamp,cx,cy,cz,c00,c01,c02,c11,c12,c22,planarity,degenerate,nx,ny,nz
void write_sparse_csv(std::ostream& os, const std::vector<SparseSurfel>& sparse);
std::vector<SparseSurfel> read_sparse_csv(std::istream& is);

/// time,tx,ty,tz,r00,r01,r02,r10,r11,r12,r20,r21,r22 at 17 significant digits.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);
/// rate_hz <= 0 takes the rate from the mean sample spacing.
Trajectory read_trajectory_csv(std::istream& is, double rate_hz = 0.0);

/// File variants. Writers go through a temporary file renamed into place;
/// failures throw kIo.
void write_surfel_ply(const std::filesystem::path& path, const SurfelMap& map);
SurfelMap read_surfel_ply(const std::filesystem::path& path);
void write_surfel_csv(const std::filesystem::path& path, const SurfelMap& map);
SurfelMap read_surfel_csv(const std::filesystem::path& path);
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj);
Trajectory read_trajectory_csv(const std::filesystem::path& path, double rate_hz = 0.0);

}  // namespace mcslam
