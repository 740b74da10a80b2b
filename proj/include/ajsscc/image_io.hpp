#pragma once

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace ajsscc {

// 8-bit interleaved raster, c = 1 (gray) or 3 (rgb)
struct ImageU8 {
  int w = 0, h = 0, c = 0;
  std::vector<unsigned char> pixels;
};

namespace detail {

inline std::optional<ImageU8> load_png(const std::string& path, bool grayscale) {
  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) return std::nullopt;
  im.format = grayscale ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  ImageU8 out;
  out.w = static_cast<int>(im.width);
  out.h = static_cast<int>(im.height);
  out.c = grayscale ? 1 : 3;
  out.pixels.resize(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&im);
    return std::nullopt;
  }
  return out;
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

inline void jpeg_err_exit(j_common_ptr cinfo) {
  JpegErr* err = reinterpret_cast<JpegErr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

inline std::optional<ImageU8> load_jpeg(const std::string& path, bool grayscale) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return std::nullopt;
  jpeg_decompress_struct cinfo;
  JpegErr jerr;
  cinfo.err = jpeg_std_error(&jerr.mgr);
  jerr.mgr.error_exit = jpeg_err_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    return std::nullopt;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = grayscale ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  ImageU8 out;
  out.w = static_cast<int>(cinfo.output_width);
  out.h = static_cast<int>(cinfo.output_height);
  out.c = static_cast<int>(cinfo.output_components);
  out.pixels.resize(static_cast<std::size_t>(out.w) * out.h * out.c);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = out.pixels.data() +
                         static_cast<std::size_t>(cinfo.output_scanline) * out.w * out.c;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return out;
}

inline bool pnm_token(std::istream& in, std::string& tok) {
  tok.clear();
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {}
      continue;
    }
    if (!std::isspace(ch)) break;
  }
  if (ch == EOF) return false;
  do {
    tok.push_back(static_cast<char>(ch));
  } while ((ch = in.get()) != EOF && !std::isspace(ch));
  return true;
}

inline std::optional<ImageU8> load_pnm(const std::string& path, bool grayscale) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string tok;
  if (!pnm_token(in, tok)) return std::nullopt;
  int channels;
  if (tok == "P5") channels = 1;
  else if (tok == "P6") channels = 3;
  else return std::nullopt;
  auto next_int = [&](long& v) {
    if (!pnm_token(in, tok)) return false;
    v = std::strtol(tok.c_str(), nullptr, 10);
    return true;
  };
  long w, h, maxval;
  if (!next_int(w) || !next_int(h) || !next_int(maxval)) return std::nullopt;
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) return std::nullopt;
  const std::size_t n = static_cast<std::size_t>(w) * h * channels;
  std::vector<unsigned char> raw8;
  if (maxval < 256) {
    raw8.resize(n);
    if (!in.read(reinterpret_cast<char*>(raw8.data()), static_cast<std::streamsize>(n)))
      return std::nullopt;
  } else {
    std::vector<unsigned char> raw16(n * 2);
    if (!in.read(reinterpret_cast<char*>(raw16.data()), static_cast<std::streamsize>(n * 2)))
      return std::nullopt;
    raw8.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned v = (static_cast<unsigned>(raw16[2 * i]) << 8) | raw16[2 * i + 1];
      raw8[i] = static_cast<unsigned char>((v * 255 + maxval / 2) / maxval);
    }
  }
  ImageU8 out;
  out.w = static_cast<int>(w);
  out.h = static_cast<int>(h);
  if (channels == 3 && grayscale) {
    out.c = 1;
    out.pixels.resize(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      // Rec. 601 luma
      const double y = 0.299 * raw8[3 * i] + 0.587 * raw8[3 * i + 1] + 0.114 * raw8[3 * i + 2];
      out.pixels[i] = static_cast<unsigned char>(y + 0.5);
    }
  } else if (channels == 1 && !grayscale) {
    out.c = 3;
    out.pixels.resize(n * 3);
    for (std::size_t i = 0; i < n; ++i)
      out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = raw8[i];
  } else {
    out.c = channels;
    out.pixels = std::move(raw8);
  }
  return out;
}

inline bool has_suffix(const std::string& s, const char* suf) {
  const std::size_t n = std::strlen(suf);
  if (s.size() < n) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const char a = static_cast<char>(std::tolower(s[s.size() - n + i]));
    if (a != suf[i]) return false;
  }
  return true;
}

}  // namespace detail

inline bool is_image_path(const std::string& path) {
  using detail::has_suffix;
  return has_suffix(path, ".png") || has_suffix(path, ".jpg") || has_suffix(path, ".jpeg") ||
         has_suffix(path, ".ppm") || has_suffix(path, ".pgm") || has_suffix(path, ".pnm");
}

// Returns nullopt on any decode problem; callers decide whether that is fatal.
inline std::optional<ImageU8> load_image(const std::string& path, bool grayscale) {
  using namespace detail;
  if (has_suffix(path, ".png")) return load_png(path, grayscale);
  if (has_suffix(path, ".jpg") || has_suffix(path, ".jpeg")) return load_jpeg(path, grayscale);
  if (has_suffix(path, ".ppm") || has_suffix(path, ".pgm") || has_suffix(path, ".pnm"))
    return load_pnm(path, grayscale);
  return std::nullopt;
}

inline bool save_pnm(const std::string& path, const ImageU8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) return false;
  out << (img.c == 1 ? "P5" : "P6") << "\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  return static_cast<bool>(out);
}

inline bool save_png(const std::string& path, const ImageU8& img) {
  png_image im;
  std::memset(&im, 0, sizeof(im));
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.w);
  im.height = static_cast<png_uint_32>(img.h);
  im.format = img.c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  return png_image_write_to_file(&im, path.c_str(), 0, img.pixels.data(), 0, nullptr) != 0;
}

}  // namespace ajsscc
