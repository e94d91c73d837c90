#pragma once

#include <algorithm>
#include <fstream>
#include <string>

#include "attribution.hpp"

namespace sgdrop {

namespace detail {

inline unsigned char to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(c * 255.0 + 0.5);
}

} // namespace detail

/// Raw grayscale map as binary PGM (P5, maxval 255).
template <typename T>
void write_pgm(const std::string& path, const SaliencyImage<T>& s) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P5\n" << s.w << " " << s.h << "\n255\n";
    for (std::size_t i = 0; i < s.v.size(); ++i)
        f.put(static_cast<char>(detail::to_byte(static_cast<double>(s.v[i]))));
    if (!f) throw std::runtime_error("write failed for " + path);
}

/// Saliency blended into the red channel of the input image at 50%, as
/// binary PPM (P6). The image is (C,H,W) with C = 1 or 3, values in [0,1].
template <typename T>
void write_ppm_overlay(const std::string& path, const Tensor<T>& image,
                       const SaliencyImage<T>& s) {
    const std::size_t C = image.extent(0), H = image.extent(1), W = image.extent(2);
    if (H != s.h || W != s.w)
        throw std::invalid_argument("overlay: saliency " + std::to_string(s.h) + "x" +
                                    std::to_string(s.w) + " does not match image " +
                                    shape_str(image.shape()));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P6\n" << W << " " << H << "\n255\n";
    for (std::size_t i = 0; i < H * W; ++i) {
        const double r = static_cast<double>(image[i]);
        const double g = static_cast<double>(C == 3 ? image[H * W + i] : image[i]);
        const double b = static_cast<double>(C == 3 ? image[2 * H * W + i] : image[i]);
        const double sal = static_cast<double>(s.v[i]);
        f.put(static_cast<char>(detail::to_byte(0.5 * r + 0.5 * sal)));
        f.put(static_cast<char>(detail::to_byte(0.5 * g)));
        f.put(static_cast<char>(detail::to_byte(0.5 * b)));
    }
    if (!f) throw std::runtime_error("write failed for " + path);
}

} // namespace sgdrop
