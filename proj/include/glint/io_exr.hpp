#pragma once

#include <ImfChannelList.h>
#include <ImfFrameBuffer.h>
#include <ImfInputFile.h>
#include <ImfOutputFile.h>

#include <string>
#include <vector>

#include "glint/error.hpp"
#include "glint/image.hpp"

namespace glint {

namespace detail {
inline const char* exr_channel_name(int channels, int c) {
    static const char* rgba[4] = {"R", "G", "B", "A"};
    if (channels == 1) return "Y";
    return rgba[c];
}
}  // namespace detail

// Float32 scanline EXR. 1 channel -> Y, 3 -> RGB, 4 -> RGBA.
inline void write_exr(const Image& img, const std::string& path) {
    require(img.channels == 1 || img.channels == 3 || img.channels == 4, "io_error",
            "unsupported EXR channel count " + std::to_string(img.channels));
    try {
        Imf::Header header(img.width, img.height);
        header.compression() = Imf::ZIP_COMPRESSION;
        std::vector<std::vector<float>> planes(img.channels);
        Imf::FrameBuffer fb;
        for (int c = 0; c < img.channels; ++c) {
            planes[c].resize(img.pixel_count());
            for (size_t p = 0; p < img.pixel_count(); ++p)
                planes[c][p] = float(img.values[p * img.channels + c]);
            const char* name = detail::exr_channel_name(img.channels, c);
            header.channels().insert(name, Imf::Channel(Imf::FLOAT));
            fb.insert(name, Imf::Slice(Imf::FLOAT, reinterpret_cast<char*>(planes[c].data()),
                                       sizeof(float), sizeof(float) * img.width));
        }
        Imf::OutputFile file(path.c_str(), header);
        file.setFrameBuffer(fb);
        file.writePixels(img.height);
    } catch (const std::exception& e) {
        fail("io_error", "EXR write failed for " + path + ": " + e.what());
    }
}

inline Image read_exr(const std::string& path) {
    try {
        Imf::InputFile file(path.c_str());
        Imath::Box2i dw = file.header().dataWindow();
        int width = dw.max.x - dw.min.x + 1;
        int height = dw.max.y - dw.min.y + 1;

        std::vector<std::string> names;
        const Imf::ChannelList& chl = file.header().channels();
        for (auto it = chl.begin(); it != chl.end(); ++it) names.emplace_back(it.name());
        // Prefer RGBA ordering when present; otherwise take channels as listed.
        std::vector<std::string> ordered;
        for (const char* want : {"R", "G", "B", "A"})
            for (const auto& n : names)
                if (n == want) ordered.push_back(n);
        if (ordered.empty()) ordered = names;
        int channels = int(ordered.size());
        require(channels >= 1, "io_error", "EXR has no channels: " + path);

        std::vector<std::vector<float>> planes(channels);
        Imf::FrameBuffer fb;
        for (int c = 0; c < channels; ++c) {
            planes[c].resize(size_t(width) * height);
            char* base = reinterpret_cast<char*>(planes[c].data()) -
                         (dw.min.x + size_t(dw.min.y) * width) * sizeof(float);
            fb.insert(ordered[c], Imf::Slice(Imf::FLOAT, base, sizeof(float),
                                             sizeof(float) * width));
        }
        file.setFrameBuffer(fb);
        file.readPixels(dw.min.y, dw.max.y);

        Image img(width, height, channels, ColorSpace::Linear);
        for (size_t p = 0; p < img.pixel_count(); ++p)
            for (int c = 0; c < channels; ++c) img.values[p * channels + c] = planes[c][p];
        return img;
    } catch (const EngineError&) {
        throw;
    } catch (const std::exception& e) {
        fail("io_error", "EXR read failed for " + path + ": " + e.what());
    }
}

}  // namespace glint
