#include "liverformer/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "liverformer/nifti.hpp"  // read_file_bytes / write_file_bytes

namespace liverformer {

namespace {

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
    if (i < 0) return 0;
    if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
    return static_cast<std::size_t>(i);
}

// Eight corner indices and weights for trilinear sampling at a continuous
// voxel position, clamp-to-edge. Shared across the three field components.
struct Corners {
    std::size_t idx[8];
    double wt[8];
};

inline Corners make_corners(const Dims& dims, double pd, double ph, double pw) {
    const double fd = std::floor(pd), fh = std::floor(ph), fw = std::floor(pw);
    const double td = pd - fd, th = ph - fh, tw = pw - fw;
    const std::size_t d0 = clamp_index(static_cast<std::ptrdiff_t>(fd), dims.d);
    const std::size_t d1 = clamp_index(static_cast<std::ptrdiff_t>(fd) + 1, dims.d);
    const std::size_t h0 = clamp_index(static_cast<std::ptrdiff_t>(fh), dims.h);
    const std::size_t h1 = clamp_index(static_cast<std::ptrdiff_t>(fh) + 1, dims.h);
    const std::size_t w0 = clamp_index(static_cast<std::ptrdiff_t>(fw), dims.w);
    const std::size_t w1 = clamp_index(static_cast<std::ptrdiff_t>(fw) + 1, dims.w);

    auto at = [&](std::size_t d, std::size_t h, std::size_t w) {
        return (d * dims.h + h) * dims.w + w;
    };
    Corners c;
    c.idx[0] = at(d0, h0, w0);
    c.idx[1] = at(d0, h0, w1);
    c.idx[2] = at(d0, h1, w0);
    c.idx[3] = at(d0, h1, w1);
    c.idx[4] = at(d1, h0, w0);
    c.idx[5] = at(d1, h0, w1);
    c.idx[6] = at(d1, h1, w0);
    c.idx[7] = at(d1, h1, w1);
    c.wt[0] = (1 - td) * (1 - th) * (1 - tw);
    c.wt[1] = (1 - td) * (1 - th) * tw;
    c.wt[2] = (1 - td) * th * (1 - tw);
    c.wt[3] = (1 - td) * th * tw;
    c.wt[4] = td * (1 - th) * (1 - tw);
    c.wt[5] = td * (1 - th) * tw;
    c.wt[6] = td * th * (1 - tw);
    c.wt[7] = td * th * tw;
    return c;
}

inline double apply(const Corners& c, const std::vector<float>& plane) {
    double s = 0.0;
    for (int k = 0; k < 8; ++k) s += c.wt[k] * plane[c.idx[k]];
    return s;
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[i + radius] = w;
        sum += w;
    }
    for (double& w : k) w /= sum;
    return k;
}

// One separable pass along `axis` (0=d, 1=h, 2=w), clamp-to-edge so constant
// inputs stay constant.
void smooth_axis(std::vector<float>& data, const Dims& dims, int axis,
                 const std::vector<double>& kernel) {
    const int radius = static_cast<int>(kernel.size() / 2);
    const std::size_t n = axis == 0 ? dims.d : axis == 1 ? dims.h : dims.w;
    std::vector<float> out(data.size());
    std::vector<double> line(n);
    auto at = [&](std::size_t d, std::size_t h, std::size_t w) {
        return (d * dims.h + h) * dims.w + w;
    };

    const std::size_t outer0 = axis == 0 ? dims.h : dims.d;
    const std::size_t outer1 = axis == 2 ? dims.h : dims.w;
    for (std::size_t a = 0; a < outer0; ++a) {
        for (std::size_t b = 0; b < outer1; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t src = axis == 0 ? at(i, a, b)
                                      : axis == 1 ? at(a, i, b)
                                                  : at(a, b, i);
                line[i] = data[src];
            }
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const std::size_t j = clamp_index(
                        static_cast<std::ptrdiff_t>(i) + k, n);
                    s += kernel[k + radius] * line[j];
                }
                const std::size_t dst = axis == 0 ? at(i, a, b)
                                      : axis == 1 ? at(a, i, b)
                                                  : at(a, b, i);
                out[dst] = static_cast<float>(s);
            }
        }
    }
    data.swap(out);
}

void smooth_volume(std::vector<float>& data, const Dims& dims, double sigma) {
    if (sigma <= 0.0) return;
    const std::vector<double> kernel = gaussian_kernel(sigma);
    for (int axis = 0; axis < 3; ++axis) smooth_axis(data, dims, axis, kernel);
}

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

VectorField read_field_blob(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 12) throw FieldError("field file too short: " + path);
    const std::uint32_t d = get_u32_le(bytes.data());
    const std::uint32_t h = get_u32_le(bytes.data() + 4);
    const std::uint32_t w = get_u32_le(bytes.data() + 8);
    const unsigned long long vox = 1ull * d * h * w;
    if (vox == 0 || vox > (1ull << 30)) {
        throw FieldError("field dims out of range: " + std::to_string(d) + "x" +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    if (bytes.size() != 12 + 3 * vox * 4) {
        throw FieldError("field file size mismatch: " + path);
    }
    VectorField f(Dims{d, h, w});
    const std::uint8_t* p = bytes.data() + 12;
    for (auto& plane : f.comp) {
        for (float& x : plane) {
            std::uint32_t u = get_u32_le(p);
            std::memcpy(&x, &u, 4);
            p += 4;
        }
    }
    f.validate();
    return f;
}

}  // namespace

void VectorField::validate() const {
    for (const auto& c : comp) {
        if (c.size() != dims.voxels()) {
            throw FieldError("field component length " + std::to_string(c.size()) +
                             " != voxel count " + std::to_string(dims.voxels()));
        }
        for (float v : c) {
            if (!std::isfinite(v)) throw FieldError("non-finite field value");
        }
    }
}

float VectorField::max_abs() const {
    float m = 0.0f;
    for (const auto& c : comp) {
        for (float v : c) m = std::max(m, std::abs(v));
    }
    return m;
}

VelocityField negate(const VelocityField& v) {
    VelocityField out = v;
    for (auto& c : out.comp) {
        for (float& x : c) x = -x;
    }
    return out;
}

std::array<double, 3> sample_field(const VectorField& f, double pd, double ph, double pw) {
    const Corners c = make_corners(f.dims, pd, ph, pw);
    return {apply(c, f.comp[0]), apply(c, f.comp[1]), apply(c, f.comp[2])};
}

ImageVolume warp_image(const ImageVolume& x, const DisplacementField& u) {
    require_same_dims(x.dims, u.dims, "warp_image");
    ImageVolume out(x.dims, x.spacing);
    out.origin = x.origin;
    std::size_t i = 0;
    for (std::size_t d = 0; d < x.dims.d; ++d) {
        for (std::size_t h = 0; h < x.dims.h; ++h) {
            for (std::size_t w = 0; w < x.dims.w; ++w, ++i) {
                const Corners c = make_corners(
                    x.dims, static_cast<double>(d) + u.comp[0][i],
                    static_cast<double>(h) + u.comp[1][i],
                    static_cast<double>(w) + u.comp[2][i]);
                out.data[i] = static_cast<float>(apply(c, x.data));
            }
        }
    }
    return out;
}

LabelVolume warp_labels(const LabelVolume& s, const DisplacementField& u) {
    require_same_dims(s.dims, u.dims, "warp_labels");
    LabelVolume out(s.dims, s.spacing);
    out.origin = s.origin;
    auto nearest = [](double c, std::size_t n) {
        return clamp_index(static_cast<std::ptrdiff_t>(std::floor(c + 0.5)), n);
    };
    std::size_t i = 0;
    for (std::size_t d = 0; d < s.dims.d; ++d) {
        for (std::size_t h = 0; h < s.dims.h; ++h) {
            for (std::size_t w = 0; w < s.dims.w; ++w, ++i) {
                const std::size_t sd = nearest(static_cast<double>(d) + u.comp[0][i], s.dims.d);
                const std::size_t sh = nearest(static_cast<double>(h) + u.comp[1][i], s.dims.h);
                const std::size_t sw = nearest(static_cast<double>(w) + u.comp[2][i], s.dims.w);
                out.data[i] = s.at(sd, sh, sw);
            }
        }
    }
    return out;
}

DisplacementField compose_fields(const DisplacementField& f1, const DisplacementField& f2) {
    require_same_dims(f1.dims, f2.dims, "compose_fields");
    DisplacementField out(f1.dims);
    std::size_t i = 0;
    for (std::size_t d = 0; d < f1.dims.d; ++d) {
        for (std::size_t h = 0; h < f1.dims.h; ++h) {
            for (std::size_t w = 0; w < f1.dims.w; ++w, ++i) {
                const Corners c = make_corners(
                    f1.dims, static_cast<double>(d) + f2.comp[0][i],
                    static_cast<double>(h) + f2.comp[1][i],
                    static_cast<double>(w) + f2.comp[2][i]);
                for (int k = 0; k < 3; ++k) {
                    out.comp[k][i] = static_cast<float>(f2.comp[k][i] + apply(c, f1.comp[k]));
                }
            }
        }
    }
    return out;
}

DisplacementField exp_velocity(const VelocityField& v, int steps) {
    if (steps < 1) throw FieldError("exp_velocity: steps must be >= 1");
    DisplacementField u(v.dims);
    const double scale = std::ldexp(1.0, -steps);  // 2^-steps
    for (int k = 0; k < 3; ++k) {
        for (std::size_t i = 0; i < u.comp[k].size(); ++i) {
            u.comp[k][i] = static_cast<float>(v.comp[k][i] * scale);
        }
    }
    for (int s = 0; s < steps; ++s) u = compose_fields(u, u);
    return u;
}

DisplacementField invert_field(const DisplacementField& u, int iters) {
    DisplacementField inv(u.dims);
    for (int it = 0; it < iters; ++it) {
        DisplacementField next(u.dims);
        std::size_t i = 0;
        for (std::size_t d = 0; d < u.dims.d; ++d) {
            for (std::size_t h = 0; h < u.dims.h; ++h) {
                for (std::size_t w = 0; w < u.dims.w; ++w, ++i) {
                    const Corners c = make_corners(
                        u.dims, static_cast<double>(d) + inv.comp[0][i],
                        static_cast<double>(h) + inv.comp[1][i],
                        static_cast<double>(w) + inv.comp[2][i]);
                    for (int k = 0; k < 3; ++k) {
                        next.comp[k][i] = static_cast<float>(-apply(c, u.comp[k]));
                    }
                }
            }
        }
        inv = std::move(next);
    }
    return inv;
}

void gaussian_smooth_inplace(VectorField& f, double sigma) {
    for (auto& c : f.comp) smooth_volume(c, f.dims, sigma);
}

ImageVolume gaussian_smooth(const ImageVolume& v, double sigma) {
    ImageVolume out = v;
    smooth_volume(out.data, out.dims, sigma);
    return out;
}

void write_field(const std::string& path, const VectorField& f) {
    f.validate();
    std::vector<std::uint8_t> bytes;
    bytes.reserve(12 + 3 * f.dims.voxels() * 4);
    put_u32_le(bytes, static_cast<std::uint32_t>(f.dims.d));
    put_u32_le(bytes, static_cast<std::uint32_t>(f.dims.h));
    put_u32_le(bytes, static_cast<std::uint32_t>(f.dims.w));
    for (const auto& plane : f.comp) {
        for (float x : plane) {
            std::uint32_t u;
            std::memcpy(&u, &x, 4);
            put_u32_le(bytes, u);
        }
    }
    write_file_bytes(path, bytes);

    const std::string sidecar =
        "vector field blob\n"
        "layout: uint32le D, H, W; then 3 planes of D*H*W float32le\n"
        "planes ordered: d-component, h-component, w-component (voxel units)\n"
        "dims: " + f.dims.str() + "\n";
    write_file_bytes(path + ".txt",
                     std::vector<std::uint8_t>(sidecar.begin(), sidecar.end()));
}

DisplacementField read_displacement_field(const std::string& path) {
    DisplacementField out;
    static_cast<VectorField&>(out) = read_field_blob(path);
    return out;
}

VelocityField read_velocity_field(const std::string& path) {
    VelocityField out;
    static_cast<VectorField&>(out) = read_field_blob(path);
    return out;
}

}  // namespace liverformer
