#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <vector>

#include "kspu/errors.hpp"
#include "kspu/tensor.hpp"

// Cyclic-group steerable convolutions: irreducible representations of C_N,
// orthonormal kernel bases solving k(gx) = rho_out(g) k(x) rho_in(g)^{-1},
// and the differentiable convolution layer built from them.
//
// Kernels are parameterized on a polar grid (rings at integer radii,
// n_angles = 4N angular samples) where the group acts exactly by a cyclic
// shift of the angular index; the constraint system is therefore exact up to
// SVD tolerance. A Cartesian (s x s) projection for the convolution itself
// is computed once per basis by area-weighted resampling.
namespace kspu::eq {

// Irreducible representation of the cyclic group C_N: frequency n with
// 0 <= n <= N/2. Dimension 1 for n = 0 (trivial) and, when N is even, for
// n = N/2 (sign); dimension 2 otherwise (rotation by 2 pi n j / N).
struct Irrep {
    int group_order = 8;
    int frequency = 0;

    Irrep() = default;
    Irrep(int n_group, int freq) : group_order(n_group), frequency(freq) {
        if (n_group < 1) throw InvalidConfig("Irrep: group order must be >= 1");
        if (freq < 0 || 2 * freq > n_group)
            throw InvalidConfig("Irrep: frequency must satisfy 0 <= n <= N/2");
    }

    int dim() const {
        if (frequency == 0) return 1;
        if (group_order % 2 == 0 && 2 * frequency == group_order) return 1;
        return 2;
    }

    Eigen::MatrixXd matrix(int element) const {
        const int j = ((element % group_order) + group_order) % group_order;
        if (dim() == 1) {
            Eigen::MatrixXd m(1, 1);
            m(0, 0) = (frequency == 0) ? 1.0 : (j % 2 == 0 ? 1.0 : -1.0);
            return m;
        }
        const double a = 2.0 * M_PI * frequency * j / group_order;
        Eigen::MatrixXd m(2, 2);
        m << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        return m;
    }

    bool operator==(const Irrep& o) const {
        return group_order == o.group_order && frequency == o.frequency;
    }
};

// Ordered direct sum of irreps; the type of a feature field.
struct FieldType {
    std::vector<Irrep> irreps;

    FieldType() = default;
    explicit FieldType(std::vector<Irrep> list) : irreps(std::move(list)) {
        if (irreps.empty()) throw InvalidConfig("FieldType: empty irrep list");
        for (const auto& ir : irreps)
            if (ir.group_order != irreps[0].group_order)
                throw InvalidConfig("FieldType: mixed group orders");
    }

    // n copies of the same irrep.
    static FieldType repeated(const Irrep& ir, int n) {
        return FieldType(std::vector<Irrep>(n, ir));
    }

    int group_order() const { return irreps[0].group_order; }

    int total_dim() const {
        int d = 0;
        for (const auto& ir : irreps) d += ir.dim();
        return d;
    }

    // Channel offset of field index f.
    int field_offset(int f) const {
        int d = 0;
        for (int i = 0; i < f; ++i) d += irreps[i].dim();
        return d;
    }
};

// Block-diagonal (orthogonal) representation matrix of group element j.
inline Eigen::MatrixXd representation_matrix(const FieldType& ft, int element) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(ft.total_dim(), ft.total_dim());
    int off = 0;
    for (const auto& ir : ft.irreps) {
        m.block(off, off, ir.dim(), ir.dim()) = ir.matrix(element);
        off += ir.dim();
    }
    return m;
}

// Orthonormal basis of steerable kernels between two (possibly compound)
// field types. Each element occupies one (out_field, in_field) block of the
// full kernel and carries both its polar samples and the projected Cartesian
// stencil. Polar arrays are indexed ((o*c_in + i)*n_rings + r)*n_angles + a.
struct SteerableBasis {
    FieldType rho_in, rho_out;
    int size = 0;         // s, odd
    int group_order = 0;  // N
    int n_rings = 0;      // ceil(s/2)
    int n_angles = 0;     // 4N

    struct Element {
        Irrep in_irrep, out_irrep;
        int out_offset = 0, in_offset = 0;  // block placement in the full kernel
        int c_out = 1, c_in = 1;
        std::vector<double> polar;  // c_out*c_in*n_rings*n_angles
        std::vector<double> cart;   // c_out*c_in*size*size
    };
    std::vector<Element> elements;

    int dimension() const { return static_cast<int>(elements.size()); }
};

namespace detail {

inline int polar_index(int o, int i, int r, int a, int c_in, int n_rings, int n_angles) {
    return ((o * c_in + i) * n_rings + r) * n_angles + a;
}

// Area-weighted polar -> Cartesian projection of one kernel block.
// Each pixel is supersampled 8x8; sub-samples beyond n_rings-1+0.5 read 0,
// the band [n_rings-1, n_rings-1+0.5] extends the outer ring flat, and the
// interior interpolates bilinearly in (radius, angle). The sub-sample lattice
// is symmetric under quarter turns, so the projection commutes with exact
// 90-degree rotations.
inline std::vector<double> project_to_cartesian(const std::vector<double>& polar, int c_out,
                                                int c_in, int n_rings, int n_angles, int s) {
    constexpr int kSub = 8;
    const double center = 0.5 * (s - 1);
    const double r_max = n_rings - 1 + 0.5;
    std::vector<double> cart(static_cast<size_t>(c_out) * c_in * s * s, 0.0);
    for (int row = 0; row < s; ++row) {
        for (int col = 0; col < s; ++col) {
            // Accumulate interpolation stencils over the sub-samples, then
            // apply them to every (o,i) block entry at once.
            std::map<std::pair<int, int>, double> stencil;  // (ring, angle) -> weight
            for (int si = 0; si < kSub; ++si) {
                for (int sj = 0; sj < kSub; ++sj) {
                    const double dr = (si + 0.5) / kSub - 0.5;
                    const double dc = (sj + 0.5) / kSub - 0.5;
                    const double ux = (col - center) + dc;
                    const double uy = (center - row) - dr;
                    const double r = std::hypot(ux, uy);
                    if (r > r_max) continue;
                    double af = std::atan2(uy, ux) / (2.0 * M_PI) * n_angles;
                    af -= n_angles * std::floor(af / n_angles);
                    int a0 = static_cast<int>(std::floor(af)) % n_angles;
                    const double fa = af - std::floor(af);
                    const int a1 = (a0 + 1) % n_angles;
                    int r0 = static_cast<int>(std::floor(r));
                    double fr = r - r0;
                    if (r0 >= n_rings - 1) {
                        r0 = n_rings - 1;
                        fr = 0.0;  // flat extension of the outer ring
                    }
                    const int r1 = std::min(r0 + 1, n_rings - 1);
                    stencil[{r0, a0}] += (1.0 - fr) * (1.0 - fa);
                    stencil[{r0, a1}] += (1.0 - fr) * fa;
                    stencil[{r1, a0}] += fr * (1.0 - fa);
                    stencil[{r1, a1}] += fr * fa;
                }
            }
            const double inv_area = 1.0 / (kSub * kSub);
            for (int o = 0; o < c_out; ++o)
                for (int i = 0; i < c_in; ++i) {
                    double acc = 0.0;
                    for (const auto& [ra, wgt] : stencil)
                        acc += wgt * polar[polar_index(o, i, ra.first, ra.second, c_in, n_rings,
                                                       n_angles)];
                    cart[((static_cast<size_t>(o) * c_in + i) * s + row) * s + col] =
                        acc * inv_area;
                }
        }
    }
    return cart;
}

}  // namespace detail

// Maximum violation of the steerability constraint of one basis element,
// over all group elements and polar grid points.
inline double constraint_residual(const SteerableBasis& basis, int element_index) {
    const auto& e = basis.elements[element_index];
    const int n = basis.group_order, rings = basis.n_rings, angles = basis.n_angles;
    const int shift_unit = angles / n;
    double worst = 0.0;
    for (int j = 0; j < n; ++j) {
        const Eigen::MatrixXd rout = e.out_irrep.matrix(j);
        const Eigen::MatrixXd rin = e.in_irrep.matrix(j);
        for (int r = 0; r < rings; ++r)
            for (int a = 0; a < angles; ++a) {
                Eigen::MatrixXd k(e.c_out, e.c_in), k_shift(e.c_out, e.c_in);
                for (int o = 0; o < e.c_out; ++o)
                    for (int i = 0; i < e.c_in; ++i) {
                        k(o, i) = e.polar[detail::polar_index(o, i, r, a, e.c_in, rings, angles)];
                        k_shift(o, i) = e.polar[detail::polar_index(
                            o, i, r, (a + j * shift_unit) % angles, e.c_in, rings, angles)];
                    }
                const double res = (k_shift - rout * k * rin.transpose()).cwiseAbs().maxCoeff();
                worst = std::max(worst, res);
            }
    }
    return worst;
}

// Solve the steerability constraint for one irrep pair. The constraint is
// stacked over all N group elements and all polar grid points as a
// homogeneous linear system; the basis is its null space (SVD threshold
// 1e-9 * sigma_max), which is orthonormal under the flat Frobenius inner
// product. A zero-dimensional basis is a valid outcome, not an error.
inline SteerableBasis solve_kernel_basis(const Irrep& rho_in, const Irrep& rho_out, int size,
                                         int group_order) {
    if (size < 1 || size % 2 == 0) throw InvalidConfig("solve_kernel_basis: size must be odd");
    if (rho_in.group_order != group_order || rho_out.group_order != group_order)
        throw InvalidConfig("solve_kernel_basis: irrep group order mismatch");
    const int n = group_order;
    const int rings = (size + 1) / 2;
    const int angles = 4 * n;
    const int shift_unit = angles / n;
    const int ci = rho_in.dim(), co = rho_out.dim();
    const int unknowns = co * ci * rings * angles;

    const int rot_rows = n * unknowns;
    const int center_rows = co * ci * (angles - 1);
    Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(rot_rows + center_rows, unknowns);
    int row = 0;
    for (int j = 0; j < n; ++j) {
        const Eigen::MatrixXd rout = rho_out.matrix(j);
        const Eigen::MatrixXd rin = rho_in.matrix(j);
        for (int r = 0; r < rings; ++r)
            for (int a = 0; a < angles; ++a)
                for (int o = 0; o < co; ++o)
                    for (int i = 0; i < ci; ++i) {
                        // k[o,i](r, a + shift) - sum_{o',i'} rout[o,o'] rin[i,i'] k[o',i'](r, a)
                        sys(row, detail::polar_index(o, i, r, (a + j * shift_unit) % angles, ci,
                                                     rings, angles)) += 1.0;
                        for (int oo = 0; oo < co; ++oo)
                            for (int ii = 0; ii < ci; ++ii)
                                sys(row, detail::polar_index(oo, ii, r, a, ci, rings, angles)) -=
                                    rout(o, oo) * rin(i, ii);
                        ++row;
                    }
    }
    // Ring 0 is the grid center: its angular duplicates are one physical
    // point and must agree.
    for (int o = 0; o < co; ++o)
        for (int i = 0; i < ci; ++i)
            for (int a = 1; a < angles; ++a) {
                sys(row, detail::polar_index(o, i, 0, a, ci, rings, angles)) += 1.0;
                sys(row, detail::polar_index(o, i, 0, 0, ci, rings, angles)) -= 1.0;
                ++row;
            }

    // JacobiSVD: BDCSVD mis-ranks columns on these highly degenerate
    // structured systems (repeated singular values), returning corrupt null
    // vectors; the one-sided Jacobi path is accurate here.
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(sys, Eigen::ComputeThinV);
    const auto& sigma = svd.singularValues();
    const double sigma_max = sigma.size() > 0 ? sigma[0] : 0.0;
    const double threshold = 1e-9 * sigma_max;

    SteerableBasis basis;
    basis.rho_in = FieldType({rho_in});
    basis.rho_out = FieldType({rho_out});
    basis.size = size;
    basis.group_order = n;
    basis.n_rings = rings;
    basis.n_angles = angles;
    for (int c = 0; c < svd.matrixV().cols(); ++c) {
        if (c < sigma.size() && sigma[c] > threshold) continue;
        SteerableBasis::Element e;
        e.in_irrep = rho_in;
        e.out_irrep = rho_out;
        e.c_out = co;
        e.c_in = ci;
        e.polar.assign(svd.matrixV().col(c).data(), svd.matrixV().col(c).data() + unknowns);
        e.cart = detail::project_to_cartesian(e.polar, co, ci, rings, angles, size);
        basis.elements.push_back(std::move(e));
    }
    return basis;
}

// ---- basis cache file ---------------------------------------------------------
//
// Binary container: magic "KSBC", version u32, key (N, freq_in, freq_out, s)
// as u32, element count and grid dims as u32, then raw 64-bit little-endian
// kernel data (polar then Cartesian per element).

inline constexpr std::uint32_t kBasisCacheVersion = 1;

inline void save_basis(const SteerableBasis& basis, const std::filesystem::path& path) {
    if (basis.rho_in.irreps.size() != 1 || basis.rho_out.irreps.size() != 1)
        throw InvalidConfig("save_basis: only single irrep-pair bases are cached");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_basis: cannot open " + path.string());
    auto put_u32 = [&out](std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    };
    out.write("KSBC", 4);
    put_u32(kBasisCacheVersion);
    put_u32(static_cast<std::uint32_t>(basis.group_order));
    put_u32(static_cast<std::uint32_t>(basis.rho_in.irreps[0].frequency));
    put_u32(static_cast<std::uint32_t>(basis.rho_out.irreps[0].frequency));
    put_u32(static_cast<std::uint32_t>(basis.size));
    put_u32(static_cast<std::uint32_t>(basis.dimension()));
    put_u32(static_cast<std::uint32_t>(basis.n_rings));
    put_u32(static_cast<std::uint32_t>(basis.n_angles));
    for (const auto& e : basis.elements) {
        out.write(reinterpret_cast<const char*>(e.polar.data()),
                  static_cast<std::streamsize>(e.polar.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(e.cart.data()),
                  static_cast<std::streamsize>(e.cart.size() * sizeof(double)));
    }
    if (!out) throw IoError("save_basis: write failed for " + path.string());
}

inline SteerableBasis load_basis(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_basis: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "KSBC", 4) != 0)
        throw IoError("load_basis: bad magic in " + path.string());
    auto get_u32 = [&in]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        return v;
    };
    if (get_u32() != kBasisCacheVersion)
        throw IoError("load_basis: unsupported version in " + path.string());
    const int n = static_cast<int>(get_u32());
    const Irrep rin(n, static_cast<int>(get_u32()));
    const Irrep rout(n, static_cast<int>(get_u32()));
    const int size = static_cast<int>(get_u32());
    const int dim = static_cast<int>(get_u32());

    SteerableBasis basis;
    basis.rho_in = FieldType({rin});
    basis.rho_out = FieldType({rout});
    basis.size = size;
    basis.group_order = n;
    basis.n_rings = static_cast<int>(get_u32());
    basis.n_angles = static_cast<int>(get_u32());
    for (int e = 0; e < dim; ++e) {
        SteerableBasis::Element el;
        el.in_irrep = rin;
        el.out_irrep = rout;
        el.c_out = rout.dim();
        el.c_in = rin.dim();
        el.polar.resize(static_cast<size_t>(el.c_out) * el.c_in * basis.n_rings * basis.n_angles);
        el.cart.resize(static_cast<size_t>(el.c_out) * el.c_in * size * size);
        in.read(reinterpret_cast<char*>(el.polar.data()),
                static_cast<std::streamsize>(el.polar.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(el.cart.data()),
                static_cast<std::streamsize>(el.cart.size() * sizeof(double)));
        basis.elements.push_back(std::move(el));
    }
    if (!in) throw IoError("load_basis: truncated file " + path.string());
    return basis;
}

// Disk-backed solve: loads the cached basis when the file exists, otherwise
// solves and writes it.
inline SteerableBasis solve_kernel_basis_cached(const Irrep& rho_in, const Irrep& rho_out,
                                                int size, int group_order,
                                                const std::filesystem::path& cache_dir) {
    const std::filesystem::path file =
        cache_dir / ("basis_N" + std::to_string(group_order) + "_f" +
                     std::to_string(rho_in.frequency) + "_f" + std::to_string(rho_out.frequency) +
                     "_s" + std::to_string(size) + ".ksbc");
    if (std::filesystem::exists(file)) return load_basis(file);
    SteerableBasis basis = solve_kernel_basis(rho_in, rho_out, size, group_order);
    std::filesystem::create_directories(cache_dir);
    save_basis(basis, file);
    return basis;
}

namespace detail {

// Process-wide cache of solved irrep-pair bases.
inline const SteerableBasis& pair_basis(const Irrep& rin, const Irrep& rout, int size, int n) {
    using Key = std::tuple<int, int, int, int>;
    static std::mutex mu;
    static std::map<Key, std::unique_ptr<SteerableBasis>> cache;
    std::lock_guard<std::mutex> lock(mu);
    const Key key{rin.frequency, rout.frequency, size, n};
    auto it = cache.find(key);
    if (it == cache.end()) {
        auto basis = std::make_unique<SteerableBasis>(solve_kernel_basis(rin, rout, size, n));
        it = cache.emplace(key, std::move(basis)).first;
    }
    return *it->second;
}

}  // namespace detail

// Basis for a full layer between compound field types: the union over all
// (out_field, in_field) pairs of the pair bases, embedded at their channel
// block offsets.
inline SteerableBasis build_layer_basis(const FieldType& rho_in, const FieldType& rho_out,
                                        int size, int group_order) {
    SteerableBasis layer;
    layer.rho_in = rho_in;
    layer.rho_out = rho_out;
    layer.size = size;
    layer.group_order = group_order;
    layer.n_rings = (size + 1) / 2;
    layer.n_angles = 4 * group_order;
    for (size_t fo = 0; fo < rho_out.irreps.size(); ++fo) {
        for (size_t fi = 0; fi < rho_in.irreps.size(); ++fi) {
            const SteerableBasis& pair =
                detail::pair_basis(rho_in.irreps[fi], rho_out.irreps[fo], size, group_order);
            for (const auto& e : pair.elements) {
                SteerableBasis::Element embedded = e;
                embedded.out_offset = rho_out.field_offset(static_cast<int>(fo));
                embedded.in_offset = rho_in.field_offset(static_cast<int>(fi));
                layer.elements.push_back(std::move(embedded));
            }
        }
    }
    return layer;
}

// Weighted combination of the basis elements into a dense (C_out,C_in,s,s)
// kernel, differentiable in the weights. The basis must outlive the graph.
template <typename T>
nn::Tensor<T> combine_basis(const nn::Tensor<T>& weights, const SteerableBasis& basis) {
    if (weights.numel() != basis.dimension())
        throw ShapeMismatch("combine_basis: weight count != basis dimension");
    const int cout = basis.rho_out.total_dim(), cin = basis.rho_in.total_dim(), s = basis.size;
    std::vector<T> kernel(static_cast<size_t>(cout) * cin * s * s, T(0));
    const SteerableBasis* bp = &basis;
    for (int j = 0; j < basis.dimension(); ++j) {
        const auto& e = basis.elements[j];
        const T w = weights.value()[j];
        for (int o = 0; o < e.c_out; ++o)
            for (int i = 0; i < e.c_in; ++i)
                for (int p = 0; p < s * s; ++p)
                    kernel[((static_cast<size_t>(e.out_offset + o) * cin) + e.in_offset + i) * s *
                               s +
                           p] += w * static_cast<T>(e.cart[(o * e.c_in + i) * s * s + p]);
    }
    return nn::detail::make_op<T>(
        {cout, cin, s, s}, std::move(kernel), {weights}, [bp, cout, cin, s](nn::Node<T>& self) {
            auto& pw = *self.parents[0];
            pw.ensure_grad();
            for (int j = 0; j < bp->dimension(); ++j) {
                const auto& e = bp->elements[j];
                T acc = T(0);
                for (int o = 0; o < e.c_out; ++o)
                    for (int i = 0; i < e.c_in; ++i)
                        for (int p = 0; p < s * s; ++p)
                            acc += self.grad[((static_cast<size_t>(e.out_offset + o) * cin) +
                                              e.in_offset + i) *
                                                 s * s +
                                             p] *
                                   static_cast<T>(e.cart[(o * e.c_in + i) * s * s + p]);
                pw.grad[j] += acc;
            }
        });
}

// Steerable convolution: stride 1, zero padding preserving the spatial size
// unless pad is given explicitly. Differentiable in weights and input.
template <typename T>
nn::Tensor<T> steerable_conv_forward(const nn::Tensor<T>& input, const SteerableBasis& basis,
                                     const nn::Tensor<T>& weights, int pad = -1) {
    if (input.shape().size() != 3 || input.shape()[0] != basis.rho_in.total_dim())
        throw ShapeMismatch("steerable_conv_forward: input channels != rho_in dim");
    if (input.shape()[1] != input.shape()[2])
        throw ShapeMismatch("steerable_conv_forward: input grid must be square");
    return nn::conv2d(input, combine_basis(weights, basis), pad);
}

// Rotation-invariant scalar per field: for 2-dimensional irreps the
// spatially averaged Euclidean norm across the irrep's components; for the
// sign irrep the averaged absolute value; for frequency 0 the plain spatial
// average (already invariant).
template <typename T>
nn::Tensor<T> invariant_pool(const nn::Tensor<T>& field, const FieldType& ft) {
    if (field.shape().size() != 3 || field.shape()[0] != ft.total_dim())
        throw ShapeMismatch("invariant_pool: channels != field type dim");
    // Norms are smoothed as sqrt(|f|^2 + eps) - sqrt(eps): differentiable at
    // zero and exactly zero on a zero field.
    const T eps = T(1e-8);
    const T eps_root = std::sqrt(eps);
    std::vector<nn::Tensor<T>> pooled;
    int off = 0;
    for (const auto& ir : ft.irreps) {
        if (ir.dim() == 1) {
            nn::Tensor<T> ch = nn::slice_channels(field, off, 1);
            if (ir.frequency == 0) {
                pooled.push_back(nn::reduce_mean(ch));
            } else {  // sign irrep: |f| is the invariant
                pooled.push_back(nn::reduce_mean(nn::add_const(
                    nn::sqrt(nn::add_const(nn::mul(ch, ch), eps)), -eps_root)));
            }
        } else {
            nn::Tensor<T> fx = nn::slice_channels(field, off, 1);
            nn::Tensor<T> fy = nn::slice_channels(field, off + 1, 1);
            nn::Tensor<T> norm = nn::add_const(
                nn::sqrt(nn::add_const(nn::add(nn::mul(fx, fx), nn::mul(fy, fy)), eps)),
                -eps_root);
            pooled.push_back(nn::reduce_mean(norm));
        }
        off += ir.dim();
    }
    return nn::stack_scalars(pooled);
}

// ---- rotations of typed feature maps (test and model support) -------------------

// Exact grid rotation by quarter_turns * 90 degrees counterclockwise plus the
// representation action on channels. Requires 4 | N so the turn is a group
// element.
template <typename T>
std::vector<T> rotate_field_exact(const std::vector<T>& values, const FieldType& ft, int h, int w,
                                  int quarter_turns) {
    if (h != w) throw ShapeMismatch("rotate_field_exact: grid must be square");
    if (ft.group_order() % 4 != 0)
        throw InvalidConfig("rotate_field_exact: needs 4 | group order");
    const int c = ft.total_dim();
    const int q = ((quarter_turns % 4) + 4) % 4;
    const int element = q * (ft.group_order() / 4);
    const Eigen::MatrixXd rho = representation_matrix(ft, element);

    // Spatial permutation: one CCW quarter turn maps out(r, c) = in(c, H-1-r).
    std::vector<T> spatial = values;
    for (int t = 0; t < q; ++t) {
        std::vector<T> next(spatial.size());
        for (int ci = 0; ci < c; ++ci)
            for (int r = 0; r < h; ++r)
                for (int col = 0; col < w; ++col)
                    next[(static_cast<size_t>(ci) * h + r) * w + col] =
                        spatial[(static_cast<size_t>(ci) * h + col) * w + (h - 1 - r)];
        spatial.swap(next);
    }
    // Channel mixing by rho(g).
    std::vector<T> out(spatial.size(), T(0));
    for (int co = 0; co < c; ++co)
        for (int ci = 0; ci < c; ++ci) {
            const double m = rho(co, ci);
            if (m == 0.0) continue;
            const T* src = spatial.data() + static_cast<size_t>(ci) * h * w;
            T* dst = out.data() + static_cast<size_t>(co) * h * w;
            for (int p = 0; p < h * w; ++p) dst[p] += static_cast<T>(m) * src[p];
        }
    return out;
}

// Rotation by an arbitrary group element with bilinear resampling (inexact on
// the grid; used to probe equivariance under the non-right-angle elements).
template <typename T>
std::vector<T> rotate_field_interp(const std::vector<T>& values, const FieldType& ft, int h,
                                   int w, int element) {
    const int c = ft.total_dim();
    const double theta = 2.0 * M_PI * element / ft.group_order();
    const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
    const double ct = std::cos(theta), st = std::sin(theta);
    std::vector<T> spatial(values.size(), T(0));
    for (int ci = 0; ci < c; ++ci) {
        const T* src = values.data() + static_cast<size_t>(ci) * h * w;
        T* dst = spatial.data() + static_cast<size_t>(ci) * h * w;
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col) {
                const double x = col - cx, y = cy - r;
                const double xs = ct * x + st * y;   // rotate by -theta
                const double ys = -st * x + ct * y;
                const double sc = cx + xs, sr = cy - ys;
                const int r0 = static_cast<int>(std::floor(sr));
                const int c0 = static_cast<int>(std::floor(sc));
                const double frr = sr - r0, fcc = sc - c0;
                double acc = 0.0;
                for (int dr = 0; dr < 2; ++dr)
                    for (int dc = 0; dc < 2; ++dc) {
                        const int rr = r0 + dr, cc2 = c0 + dc;
                        if (rr < 0 || rr >= h || cc2 < 0 || cc2 >= w) continue;
                        const double wgt = (dr ? frr : 1.0 - frr) * (dc ? fcc : 1.0 - fcc);
                        acc += wgt * src[static_cast<size_t>(rr) * w + cc2];
                    }
                dst[static_cast<size_t>(r) * w + col] = static_cast<T>(acc);
            }
    }
    const Eigen::MatrixXd rho = representation_matrix(ft, element);
    std::vector<T> out(spatial.size(), T(0));
    for (int co = 0; co < c; ++co)
        for (int ci = 0; ci < c; ++ci) {
            const double m = rho(co, ci);
            if (m == 0.0) continue;
            const T* src = spatial.data() + static_cast<size_t>(ci) * h * w;
            T* dst = out.data() + static_cast<size_t>(co) * h * w;
            for (int p = 0; p < h * w; ++p) dst[p] += static_cast<T>(m) * src[p];
        }
    return out;
}

}  // namespace kspu::eq
