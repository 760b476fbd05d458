#ifndef CFWD_IMAGING_HPP
#define CFWD_IMAGING_HPP

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "cfwd/nn.hpp"
#include "cfwd/tensor.hpp"

namespace cfwd {

// ---------------------------------------------------------------------------
// image file I/O (8-bit PNG and JPEG in, 8-bit PNG out)

namespace io_detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jump, 1);
}

inline Tensor rows_to_tensor(const std::vector<unsigned char>& bytes, int h, int w, int c) {
    Tensor img({h, w, c});
    for (long i = 0; i < img.numel(); ++i) img[i] = bytes[static_cast<std::size_t>(i)] / 255.0;
    return img;
}

inline Tensor load_png(std::FILE* fp, const std::string& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, ErrorCode::CorruptData, "png reader allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail(ErrorCode::CorruptData, "png info allocation failed");
    }
    std::vector<unsigned char> bytes;
    std::vector<png_bytep> row_ptrs;
    int h = 0, w = 0, c = 0;
    volatile bool deep = false;  // written between setjmp and longjmp
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        if (deep) fail(ErrorCode::UnsupportedFormat, "16-bit PNG is not supported: " + path);
        fail(ErrorCode::CorruptData, "failed to decode PNG " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    if (png_get_bit_depth(png, info) == 16) {
        deep = true;
        longjmp(png_jmpbuf(png), 1);  // unified cleanup path
    }
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    c = static_cast<int>(png_get_channels(png, info));
    if (c != 1 && c != 3) longjmp(png_jmpbuf(png), 1);
    bytes.resize(static_cast<std::size_t>(h) * w * c);
    row_ptrs.resize(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) row_ptrs[static_cast<std::size_t>(y)] = &bytes[static_cast<std::size_t>(y) * w * c];
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return rows_to_tensor(bytes, h, w, c);
}

inline Tensor load_jpeg(std::FILE* fp, const std::string& path) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    std::vector<unsigned char> bytes;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        fail(ErrorCode::CorruptData, "failed to decode JPEG " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    int w = static_cast<int>(cinfo.output_width);
    int h = static_cast<int>(cinfo.output_height);
    int c = cinfo.output_components;
    bytes.resize(static_cast<std::size_t>(h) * w * c);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = &bytes[static_cast<std::size_t>(cinfo.output_scanline) * w * c];
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return rows_to_tensor(bytes, h, w, c);
}

}  // namespace io_detail

/// Loads an 8-bit PNG or JPEG as an HWC tensor in [0,1] (RGB or grayscale).
inline Tensor load_image(const std::string& path) {
    require(std::filesystem::exists(path), ErrorCode::MissingFile, "no such image: " + path);
    io_detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    require(fp != nullptr, ErrorCode::MissingFile, "cannot open " + path);
    unsigned char magic[2] = {0, 0};
    std::size_t got = std::fread(magic, 1, 2, fp.get());
    require(got == 2, ErrorCode::CorruptData, "file too short: " + path);
    std::rewind(fp.get());
    if (magic[0] == 0x89 && magic[1] == 'P') return io_detail::load_png(fp.get(), path);
    if (magic[0] == 0xFF && magic[1] == 0xD8) return io_detail::load_jpeg(fp.get(), path);
    fail(ErrorCode::UnsupportedFormat, "not a PNG or JPEG: " + path);
}

/// Writes an image-valued tensor as an 8-bit PNG. Quantization is
/// round-half-up: floor(v*255 + 0.5).
inline void save_image(const Tensor& img, const std::string& path) {
    require(img.rank() == 3 && (img.channels() == 1 || img.channels() == 3), ErrorCode::InvalidRange,
            "save_image expects HWC with 1 or 3 channels");
    require(is_image_valued(img), ErrorCode::InvalidRange, "save_image expects finite values in [0,1]");
    int h = img.height(), w = img.width(), c = img.channels();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * c);
    for (long i = 0; i < img.numel(); ++i) {
        double q = std::floor(img[i] * 255.0 + 0.5);
        bytes[static_cast<std::size_t>(i)] = static_cast<unsigned char>(std::clamp(q, 0.0, 255.0));
    }
    io_detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(fp != nullptr, ErrorCode::WriteFailure, "cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, ErrorCode::WriteFailure, "png writer allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(ErrorCode::WriteFailure, "png info allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorCode::WriteFailure, "failed to write PNG " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) png_write_row(png, &bytes[static_cast<std::size_t>(y) * w * c]);
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// paired datasets

struct PairedSample {
    Tensor low;
    Tensor high;
    std::string identifier;
};

/// Lists `<root>/low` and `<root>/high`, pairing files by identical name.
/// Images are loaded lazily via load_pair.
class Dataset {
public:
    explicit Dataset(const std::string& root) : root_(root) {
        namespace fs = std::filesystem;
        fs::path lo = fs::path(root) / "low";
        fs::path hi = fs::path(root) / "high";
        require(fs::is_directory(lo) && fs::is_directory(hi), ErrorCode::MissingFile,
                "dataset root must contain low/ and high/ directories: " + root);
        std::vector<std::string> lows;
        for (const auto& e : fs::directory_iterator(lo))
            if (e.is_regular_file() && is_image_name(e.path().filename().string()))
                lows.push_back(e.path().filename().string());
        std::sort(lows.begin(), lows.end());
        for (const auto& name : lows)
            if (fs::exists(hi / name)) names_.push_back(name);
        require(!names_.empty(), ErrorCode::EmptyDataset, "no matching low/high pairs under " + root);
    }

    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }

    PairedSample load_pair(std::size_t i) const {
        namespace fs = std::filesystem;
        const std::string& name = names_.at(i);
        PairedSample s;
        s.identifier = name;
        s.low = load_image((fs::path(root_) / "low" / name).string());
        s.high = load_image((fs::path(root_) / "high" / name).string());
        require(s.low.same_shape(s.high), ErrorCode::ShapeMismatch, "low/high size mismatch for " + name);
        return s;
    }

    static bool is_image_name(const std::string& name) {
        auto dot = name.rfind('.');
        if (dot == std::string::npos) return false;
        std::string ext = name.substr(dot + 1);
        for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        return ext == "png" || ext == "jpg" || ext == "jpeg";
    }

private:
    std::string root_;
    std::vector<std::string> names_;
};

/// Crops the same uniformly random window out of both images of a pair.
inline PairedSample sample_patch_pair(const PairedSample& sample, int size, Rng& rng) {
    int h = sample.low.height(), w = sample.low.width();
    require(size >= 1 && size <= std::min(h, w), ErrorCode::PatchTooLarge,
            "patch size " + std::to_string(size) + " exceeds image " + std::to_string(h) + "x" + std::to_string(w));
    int oy = static_cast<int>(rng.uniform_int(0, h - size));
    int ox = static_cast<int>(rng.uniform_int(0, w - size));
    PairedSample out;
    out.identifier = sample.identifier;
    out.low = Tensor({size, size, sample.low.channels()});
    out.high = Tensor({size, size, sample.high.channels()});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < sample.low.channels(); ++c) {
                out.low.at(y, x, c) = sample.low.at(oy + y, ox + x, c);
                out.high.at(y, x, c) = sample.high.at(oy + y, ox + x, c);
            }
    return out;
}

inline Tensor flip_horizontal(const Tensor& img) {
    require(img.rank() == 3, ErrorCode::ShapeMismatch, "flip_horizontal expects HWC");
    Tensor out(img.shape);
    int h = img.height(), w = img.width(), c = img.channels();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k) out.at(y, x, k) = img.at(y, w - 1 - x, k);
    return out;
}

// ---------------------------------------------------------------------------
// full-reference metrics

/// Peak signal-to-noise ratio against peak 1.0, in dB; +inf for identical
/// inputs.
inline double psnr(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "psnr");
    double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

namespace ssim_detail {

/// 11x11 Gaussian window with sigma 1.5, normalized to unit sum.
inline const std::vector<double>& gaussian_window11() {
    static const std::vector<double> w = [] {
        std::vector<double> v(11 * 11);
        double sum = 0.0;
        for (int y = 0; y < 11; ++y)
            for (int x = 0; x < 11; ++x) {
                double dy = y - 5.0, dx = x - 5.0;
                v[static_cast<std::size_t>(y * 11 + x)] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
                sum += v[static_cast<std::size_t>(y * 11 + x)];
            }
        for (auto& e : v) e /= sum;
        return v;
    }();
    return w;
}

inline Tensor window_weights(int channels) {
    const auto& w = gaussian_window11();
    Tensor out({11, 11, channels});
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x)
            for (int c = 0; c < channels; ++c) out.at(y, x, c) = w[static_cast<std::size_t>(y * 11 + x)];
    return out;
}

}  // namespace ssim_detail

/// Differentiable structural similarity: Gaussian 11x11 window, sigma 1.5,
/// C1=0.01^2, C2=0.03^2, valid positions only, averaged over channels.
inline ad::Var ssim_ad(ad::Tape& t, ad::Var a, ad::Var b) {
    using namespace ad;
    const Tensor& av = t.val(a);
    check_same_shape(av, t.val(b), "ssim");
    require(av.rank() == 3, ErrorCode::ShapeMismatch, "ssim expects HWC");
    require(std::min(av.height(), av.width()) >= 11, ErrorCode::ImageTooSmall,
            "ssim needs both sides >= 11");
    int c = av.channels();
    Var w = t.constant(ssim_detail::window_weights(c));
    Var zb = t.constant(zeros({c}));
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    Var mu_a = depthwise_conv2d(t, a, w, zb);
    Var mu_b = depthwise_conv2d(t, b, w, zb);
    Var ex_aa = depthwise_conv2d(t, mul(t, a, a), w, zb);
    Var ex_bb = depthwise_conv2d(t, mul(t, b, b), w, zb);
    Var ex_ab = depthwise_conv2d(t, mul(t, a, b), w, zb);
    Var var_a = sub(t, ex_aa, mul(t, mu_a, mu_a));
    Var var_b = sub(t, ex_bb, mul(t, mu_b, mu_b));
    Var cov = sub(t, ex_ab, mul(t, mu_a, mu_b));
    Var num = mul(t, affine(t, scale(t, mul(t, mu_a, mu_b), 2.0), 1.0, c1),
                  affine(t, scale(t, cov, 2.0), 1.0, c2));
    Var den = mul(t, affine(t, add(t, mul(t, mu_a, mu_a), mul(t, mu_b, mu_b)), 1.0, c1),
                  affine(t, add(t, var_a, var_b), 1.0, c2));
    return mean(t, div(t, num, den));
}

/// Mean structural similarity in [-1, 1].
inline double ssim(const Tensor& a, const Tensor& b) {
    ad::Tape t;
    return t.val(ssim_ad(t, t.constant(a), t.constant(b)))[0];
}

}  // namespace cfwd

#endif  // CFWD_IMAGING_HPP
