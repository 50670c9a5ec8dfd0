#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "oaflow/geometry.hpp"

namespace oaflow {

using Rgb = std::array<std::uint8_t, 3>;

// ASCII PLY export; colors optional (empty = plain xyz)
template <class Real>
void write_ply(const std::string& path, const Points<Real>& pts,
               const std::vector<Rgb>& colors = {}) {
    if (!colors.empty() && colors.size() != pts.size())
        throw std::invalid_argument("write_ply: color count mismatch");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_ply: cannot open " + path);
    f << "ply\nformat ascii 1.0\nelement vertex " << pts.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
    if (!colors.empty())
        f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    f << "end_header\n";
    f.precision(9);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        f << float(pts[i][0]) << " " << float(pts[i][1]) << " " << float(pts[i][2]);
        if (!colors.empty())
            f << " " << int(colors[i][0]) << " " << int(colors[i][1]) << " "
              << int(colors[i][2]);
        f << "\n";
    }
    if (!f) throw std::runtime_error("write_ply: write failed for " + path);
}

// Reads the ASCII dialect written above (xyz with optional uchar rgb).
template <class Real>
Points<Real> read_ply(const std::string& path, std::vector<Rgb>* colors = nullptr) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_ply: cannot open " + path);
    std::string line;
    std::size_t n = 0;
    bool has_rgb = false;
    if (!std::getline(f, line) || line != "ply")
        throw std::runtime_error("read_ply: not a PLY file: " + path);
    while (std::getline(f, line)) {
        if (line.rfind("element vertex", 0) == 0)
            n = std::stoul(line.substr(std::string("element vertex ").size()));
        else if (line == "property uchar red")
            has_rgb = true;
        else if (line == "end_header")
            break;
    }
    Points<Real> pts(n);
    if (colors) colors->assign(has_rgb ? n : 0, Rgb{0, 0, 0});
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(f, line))
            throw std::runtime_error("read_ply: truncated vertex list in " + path);
        std::istringstream is(line);
        double x, y, z;
        if (!(is >> x >> y >> z))
            throw std::runtime_error("read_ply: bad vertex line in " + path);
        pts[i] = {Real(x), Real(y), Real(z)};
        if (has_rgb) {
            int r, g, b;
            if (!(is >> r >> g >> b))
                throw std::runtime_error("read_ply: bad color in " + path);
            if (colors) (*colors)[i] = {std::uint8_t(r), std::uint8_t(g), std::uint8_t(b)};
        }
    }
    return pts;
}

}  // namespace oaflow
