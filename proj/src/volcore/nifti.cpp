#include <zlib.h>

#include <cmath>
#include <cstring>

#include "common/error.hpp"
#include "volcore/volume.hpp"

// Minimal NIfTI-1 reader/writer. Files are read through zlib's gz layer,
// which handles both plain and gzip-compressed streams transparently.

namespace tsyn::vol {

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
    float intent_p1, intent_p2, intent_p3;
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
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t DT_UINT8 = 2;
constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_INT32 = 8;
constexpr std::int16_t DT_FLOAT32 = 16;
constexpr std::int16_t DT_FLOAT64 = 64;
constexpr std::int16_t DT_INT8 = 256;
constexpr std::int16_t DT_UINT16 = 512;

template <typename T>
void bswap(T& v) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
}

void swap_header(Nifti1Header& h) {
    bswap(h.sizeof_hdr);
    bswap(h.extents);
    bswap(h.session_error);
    for (auto& d : h.dim) bswap(d);
    bswap(h.intent_p1);
    bswap(h.intent_p2);
    bswap(h.intent_p3);
    bswap(h.intent_code);
    bswap(h.datatype);
    bswap(h.bitpix);
    bswap(h.slice_start);
    for (auto& p : h.pixdim) bswap(p);
    bswap(h.vox_offset);
    bswap(h.scl_slope);
    bswap(h.scl_inter);
    bswap(h.slice_end);
    bswap(h.cal_max);
    bswap(h.cal_min);
    bswap(h.slice_duration);
    bswap(h.toffset);
    bswap(h.glmax);
    bswap(h.glmin);
    bswap(h.qform_code);
    bswap(h.sform_code);
    bswap(h.quatern_b);
    bswap(h.quatern_c);
    bswap(h.quatern_d);
    bswap(h.qoffset_x);
    bswap(h.qoffset_y);
    bswap(h.qoffset_z);
    for (auto& v : h.srow_x) bswap(v);
    for (auto& v : h.srow_y) bswap(v);
    for (auto& v : h.srow_z) bswap(v);
}

struct GzFile {
    gzFile f = nullptr;
    explicit GzFile(const std::filesystem::path& p, const char* mode) { f = gzopen(p.string().c_str(), mode); }
    ~GzFile() {
        if (f) gzclose(f);
    }
    explicit operator bool() const { return f != nullptr; }
};

int axis_of(char code) {
    switch (code) {
        case 'R':
        case 'L':
            return 0;
        case 'A':
        case 'P':
            return 1;
        case 'S':
        case 'I':
            return 2;
        default:
            return -1;
    }
}

int sign_of(char code) { return (code == 'R' || code == 'A' || code == 'S') ? 1 : -1; }

char code_for(int world_axis, int sign) {
    static const char pos[3] = {'R', 'A', 'S'};
    static const char neg[3] = {'L', 'P', 'I'};
    return sign >= 0 ? pos[world_axis] : neg[world_axis];
}

// 3x3 direction matrix (columns = world direction per index axis) -> axcodes
void directions_to_codes(const double R[3][3], std::array<char, 3>& codes, const std::filesystem::path& path) {
    bool used[3] = {false, false, false};
    for (int a = 0; a < 3; ++a) {
        int best = 0;
        for (int w = 1; w < 3; ++w)
            if (std::abs(R[w][a]) > std::abs(R[best][a])) best = w;
        if (std::abs(R[best][a]) == 0.0 || used[best])
            fail_io("malformed header (degenerate orientation): " + path.string());
        used[best] = true;
        codes[a] = code_for(best, R[best][a] >= 0 ? 1 : -1);
    }
}

}  // namespace

Volume load_volume(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail_io("missing file: " + path.string());
    GzFile gz(path, "rb");
    if (!gz) fail_io("cannot open file: " + path.string());

    Nifti1Header h{};
    if (gzread(gz.f, &h, sizeof(h)) != static_cast<int>(sizeof(h)))
        fail_io("malformed header (truncated): " + path.string());

    bool swapped = false;
    if (h.dim[0] < 1 || h.dim[0] > 7) {
        swap_header(h);
        swapped = true;
    }
    if (h.sizeof_hdr != 348) fail_io("malformed header (sizeof_hdr != 348): " + path.string());
    if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
        fail_io("malformed header (bad magic): " + path.string());

    if (h.dim[0] < 3) fail_io("non-3D payload: " + path.string());
    if (h.dim[0] > 3) {
        for (int d = 4; d <= h.dim[0]; ++d)
            if (h.dim[d] > 1) fail_io("non-3D payload: " + path.string());
    }
    const int I = h.dim[1], J = h.dim[2], K = h.dim[3];
    if (I < 1 || J < 1 || K < 1) fail_io("malformed header (non-positive dims): " + path.string());

    Volume v;
    v.shape = {I, J, K};

    double R[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    if (h.sform_code > 0) {
        const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
        for (int w = 0; w < 3; ++w)
            for (int a = 0; a < 3; ++a) R[w][a] = rows[w][a];
        v.origin = {h.srow_x[3], h.srow_y[3], h.srow_z[3]};
    } else if (h.qform_code > 0) {
        const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        const double a2 = std::max(0.0, 1.0 - b * b - c * c - d * d);
        const double a = std::sqrt(a2);
        const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
        const double Q[3][3] = {
            {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c},
        };
        for (int w = 0; w < 3; ++w)
            for (int col = 0; col < 3; ++col) R[w][col] = Q[w][col] * h.pixdim[col + 1] * (col == 2 ? qfac : 1.0);
        v.origin = {h.qoffset_x, h.qoffset_y, h.qoffset_z};
    } else {
        for (int a = 0; a < 3; ++a) R[a][a] = h.pixdim[a + 1] > 0 ? h.pixdim[a + 1] : 1.0;
        v.origin = {0, 0, 0};
    }
    for (int a = 0; a < 3; ++a) {
        const double sp = std::sqrt(R[0][a] * R[0][a] + R[1][a] * R[1][a] + R[2][a] * R[2][a]);
        v.spacing[a] = sp > 0 ? sp : 1.0;
    }
    directions_to_codes(R, v.axcodes, path);

    const std::int64_t n = v.voxels();
    const int bytes_per = h.bitpix / 8;
    if (gzseek(gz.f, static_cast<z_off_t>(h.vox_offset), SEEK_SET) < 0)
        fail_io("malformed header (bad vox_offset): " + path.string());
    std::vector<unsigned char> raw(static_cast<size_t>(n) * bytes_per);
    const int want = static_cast<int>(raw.size());
    if (gzread(gz.f, raw.data(), want) != want) fail_io("truncated payload: " + path.string());

    v.data.resize(static_cast<size_t>(n));
    auto convert = [&](auto sample) {
        using T = decltype(sample);
        const T* p = reinterpret_cast<const T*>(raw.data());
        for (std::int64_t i = 0; i < n; ++i) {
            T x = p[i];
            if (swapped && sizeof(T) > 1) bswap(x);
            v.data[i] = static_cast<float>(x);
        }
    };
    switch (h.datatype) {
        case DT_UINT8:
            convert(std::uint8_t{});
            break;
        case DT_INT8:
            convert(std::int8_t{});
            break;
        case DT_INT16:
            convert(std::int16_t{});
            break;
        case DT_UINT16:
            convert(std::uint16_t{});
            break;
        case DT_INT32:
            convert(std::int32_t{});
            break;
        case DT_FLOAT32:
            convert(float{});
            break;
        case DT_FLOAT64:
            convert(double{});
            break;
        default:
            fail_io("unsupported datatype " + std::to_string(h.datatype) + ": " + path.string());
    }
    if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
        for (auto& x : v.data) x = x * h.scl_slope + h.scl_inter;
    }
    return v;
}

namespace {

void write_nifti(const std::filesystem::path& path, const Index3& shape, const Vec3& spacing,
                 const std::array<char, 3>& axcodes, const Vec3& origin, std::int16_t datatype,
                 const void* payload, std::int64_t payload_bytes) {
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<std::int16_t>(shape[0]);
    h.dim[2] = static_cast<std::int16_t>(shape[1]);
    h.dim[3] = static_cast<std::int16_t>(shape[2]);
    for (int d = 4; d < 8; ++d) h.dim[d] = 1;
    h.datatype = datatype;
    h.bitpix = datatype == DT_UINT8 ? 8 : 32;
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(spacing[a]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // mm
    h.sform_code = 1;
    h.qform_code = 0;
    float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int a = 0; a < 3; ++a) {
        const int w = axis_of(axcodes[a]);
        rows[w][a] = static_cast<float>(sign_of(axcodes[a]) * spacing[a]);
    }
    for (int w = 0; w < 3; ++w) rows[w][3] = static_cast<float>(origin[w]);
    std::memcpy(h.magic, "n+1", 4);

    const std::string p = path.string();
    const bool gzip = p.size() > 3 && p.compare(p.size() - 3, 3, ".gz") == 0;
    GzFile gz(path, gzip ? "wb" : "wbT");
    if (!gz) fail_io("cannot write file: " + p);
    const char ext[4] = {0, 0, 0, 0};
    if (gzwrite(gz.f, &h, sizeof(h)) != static_cast<int>(sizeof(h)) || gzwrite(gz.f, ext, 4) != 4 ||
        gzwrite(gz.f, payload, static_cast<unsigned>(payload_bytes)) != static_cast<int>(payload_bytes))
        fail_io("short write: " + p);
}

}  // namespace

void save_volume(const Volume& v, const std::filesystem::path& path) {
    write_nifti(path, v.shape, v.spacing, v.axcodes, v.origin, DT_FLOAT32, v.data.data(),
                static_cast<std::int64_t>(v.data.size()) * 4);
}

VoxelMask load_mask(const std::filesystem::path& path) {
    Volume v = load_volume(path);
    VoxelMask m(v.shape, v.spacing);
    for (size_t i = 0; i < v.data.size(); ++i) {
        const float x = v.data[i];
        if (x != 0.0f && x != 1.0f) fail_io("mask values must be 0/1: " + path.string());
        m.data[i] = x != 0.0f ? 1 : 0;
    }
    return m;
}

void save_mask(const VoxelMask& m, const Volume& like, const std::filesystem::path& path) {
    if (m.shape != like.shape) fail_runtime("save_mask: mask/volume shape mismatch");
    write_nifti(path, m.shape, m.spacing, like.axcodes, like.origin, DT_UINT8, m.data.data(),
                static_cast<std::int64_t>(m.data.size()));
}

void save_mask(const VoxelMask& m, const std::filesystem::path& path) {
    write_nifti(path, m.shape, m.spacing, {'R', 'A', 'S'}, {0, 0, 0}, DT_UINT8, m.data.data(),
                static_cast<std::int64_t>(m.data.size()));
}

bool valid_axcodes(const std::string& axcodes) {
    if (axcodes.size() != 3) return false;
    bool used[3] = {false, false, false};
    for (char c : axcodes) {
        const int a = axis_of(c);
        if (a < 0 || used[a]) return false;
        used[a] = true;
    }
    return true;
}

Volume reorient(const Volume& v, const std::string& axcodes) {
    if (!valid_axcodes(axcodes)) fail_config("invalid axcodes: '" + axcodes + "'");

    // map: target axis j <- source axis src[j], flipped if flip[j]
    int src[3];
    bool flip[3];
    for (int j = 0; j < 3; ++j) {
        const int want = axis_of(axcodes[j]);
        int found = -1;
        for (int i = 0; i < 3; ++i)
            if (axis_of(v.axcodes[i]) == want) found = i;
        if (found < 0) fail_runtime("volume carries invalid axcodes");
        src[j] = found;
        flip[j] = sign_of(v.axcodes[found]) != sign_of(axcodes[j]);
    }

    Volume out;
    out.shape = {v.shape[src[0]], v.shape[src[1]], v.shape[src[2]]};
    out.spacing = {v.spacing[src[0]], v.spacing[src[1]], v.spacing[src[2]]};
    out.axcodes = {axcodes[0], axcodes[1], axcodes[2]};
    out.data.resize(v.data.size());

    // world position of the voxel that becomes out(0,0,0)
    Index3 first{};
    for (int j = 0; j < 3; ++j) first[src[j]] = flip[j] ? v.shape[src[j]] - 1 : 0;
    out.origin = v.origin;
    for (int i = 0; i < 3; ++i) {
        const int w = axis_of(v.axcodes[i]);
        out.origin[w] += sign_of(v.axcodes[i]) * v.spacing[i] * first[i];
    }

    Index3 sidx{};
    for (int a = 0; a < out.shape[0]; ++a)
        for (int b = 0; b < out.shape[1]; ++b)
            for (int c = 0; c < out.shape[2]; ++c) {
                const int oidx[3] = {a, b, c};
                for (int j = 0; j < 3; ++j)
                    sidx[src[j]] = flip[j] ? v.shape[src[j]] - 1 - oidx[j] : oidx[j];
                out.at(a, b, c) = v.at(sidx[0], sidx[1], sidx[2]);
            }
    return out;
}

}  // namespace tsyn::vol
