#include "hrtse/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

#include "hrtse/common.hpp"

namespace hrtse {

namespace {

void put_u32(std::string& s, uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                 char((v >> 24) & 0xff)};
    s.append(b, 4);
}

void put_u16(std::string& s, uint16_t v) {
    char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
    s.append(b, 2);
}

uint32_t get_u32(const unsigned char* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
           uint32_t(p[3]) << 24;
}

uint16_t get_u16(const unsigned char* p) {
    return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}

}  // namespace

Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open wav file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    if (buf.size() < 12 || buf.compare(0, 4, "RIFF") != 0 ||
        buf.compare(8, 4, "WAVE") != 0)
        throw IoError("not a RIFF/WAVE file: " + path);

    const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data());
    size_t pos = 12;
    int format = 0, channels = 0, rate = 0, bits = 0;
    size_t data_off = 0, data_len = 0;
    while (pos + 8 <= buf.size()) {
        std::string id = buf.substr(pos, 4);
        uint32_t len = get_u32(p + pos + 4);
        size_t body = pos + 8;
        if (body + len > buf.size()) len = uint32_t(buf.size() - body);
        if (id == "fmt ") {
            if (len < 16) throw IoError("truncated fmt chunk: " + path);
            format = get_u16(p + body);
            channels = get_u16(p + body + 2);
            rate = int(get_u32(p + body + 4));
            bits = get_u16(p + body + 14);
        } else if (id == "data") {
            data_off = body;
            data_len = len;
        }
        pos = body + len + (len & 1);
    }
    if (format == 0 || data_off == 0)
        throw IoError("missing fmt/data chunk: " + path);
    if (channels < 1) throw IoError("bad channel count: " + path);

    Waveform w;
    w.sample_rate_hz = rate;
    size_t frames = 0;
    if (format == 1 && bits == 16) {
        frames = data_len / (2 * channels);
        w.samples.resize(frames);
        for (size_t i = 0; i < frames; ++i) {
            double acc = 0.0;
            for (int c = 0; c < channels; ++c) {
                int16_t v = int16_t(get_u16(p + data_off + 2 * (i * channels + c)));
                acc += double(v) / 32768.0;
            }
            w.samples[i] = float(acc / channels);
        }
    } else if (format == 3 && bits == 32) {
        frames = data_len / (4 * channels);
        w.samples.resize(frames);
        for (size_t i = 0; i < frames; ++i) {
            double acc = 0.0;
            for (int c = 0; c < channels; ++c) {
                uint32_t u = get_u32(p + data_off + 4 * (i * channels + c));
                float v;
                std::memcpy(&v, &u, 4);
                acc += v;
            }
            w.samples[i] = float(acc / channels);
        }
    } else {
        throw IoError("unsupported wav encoding (need pcm16 or float32): " + path);
    }
    return w;
}

void write_wav(const std::string& path, const Waveform& w, int bits) {
    if (bits != 16 && bits != 32)
        throw ValueError("write_wav: bits must be 16 or 32");
    std::string out;
    uint32_t n = uint32_t(w.samples.size());
    uint16_t bytes_per = bits == 16 ? 2 : 4;
    uint32_t data_len = n * bytes_per;
    out.reserve(60 + data_len);
    out += "RIFF";
    put_u32(out, 4 + 24 + (bits == 32 ? 12 : 0) + 8 + data_len);
    out += "WAVE";
    out += "fmt ";
    put_u32(out, 16);
    put_u16(out, bits == 16 ? 1 : 3);
    put_u16(out, 1);
    put_u32(out, uint32_t(w.sample_rate_hz));
    put_u32(out, uint32_t(w.sample_rate_hz) * bytes_per);
    put_u16(out, bytes_per);
    put_u16(out, uint16_t(bits));
    if (bits == 32) {
        // fact chunk is required for non-PCM formats.
        out += "fact";
        put_u32(out, 4);
        put_u32(out, n);
    }
    out += "data";
    put_u32(out, data_len);
    if (bits == 16) {
        for (float v : w.samples) {
            long q = std::lrint(double(v) * 32768.0);
            q = std::min(32767L, std::max(-32768L, q));
            put_u16(out, uint16_t(int16_t(q)));
        }
    } else {
        for (float v : w.samples) {
            uint32_t u;
            std::memcpy(&u, &v, 4);
            put_u32(out, u);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write wav file: " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("short write: " + path);
}

Waveform resample(const Waveform& w, int target_hz) {
    if (target_hz <= 0) throw ValueError("resample: bad target rate");
    if (target_hz == w.sample_rate_hz) return w;
    int g = std::gcd(w.sample_rate_hz, target_hz);
    int64_t p = w.sample_rate_hz / g;  // input samples per q output samples
    int64_t q = target_hz / g;

    const int W = 16;  // half-width of the sinc kernel, in input samples
    double fc = std::fmin(1.0, double(target_hz) / double(w.sample_rate_hz));
    int64_t n_in = w.size();
    int64_t n_out = n_in * q / p;
    Waveform out;
    out.sample_rate_hz = target_hz;
    out.samples.resize(size_t(n_out));

    for (int64_t m = 0; m < n_out; ++m) {
        int64_t num = m * p;
        int64_t base = num / q;
        double frac = double(num % q) / double(q);
        double t = double(base) + frac;  // input-time of this output sample
        double acc = 0.0;
        int64_t k0 = base - W + 1, k1 = base + W;
        for (int64_t k = k0; k <= k1; ++k) {
            if (k < 0 || k >= n_in) continue;
            double d = t - double(k);
            double win = 0.5 + 0.5 * std::cos(M_PI * d / double(W));
            double u = fc * d;
            double s = u == 0.0 ? 1.0 : std::sin(M_PI * u) / (M_PI * u);
            acc += double(w.samples[size_t(k)]) * fc * s * win;
        }
        out.samples[size_t(m)] = float(acc);
    }
    return out;
}

}  // namespace hrtse
