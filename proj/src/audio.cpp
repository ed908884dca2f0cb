#include "ftsep/audio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ftsep/fft.hpp"

namespace ftsep {

void StftConfig::validate() const {
    if (n_fft < 2 || n_fft % 2 != 0) throw ConfigError("stft: n_fft must be even and >= 2");
    if (hop < 1 || hop > n_fft) throw ConfigError("stft: hop must be in [1, n_fft]");
}

std::vector<double> hann_window(int64_t n) {
    if (n < 2) throw std::invalid_argument("hann_window: n must be >= 2");
    std::vector<double> w(n);
    for (int64_t k = 0; k < n; ++k) w[k] = 0.5 * (1.0 - std::cos(2.0 * fft::kPi * k / static_cast<double>(n)));
    return w;
}

namespace {

// Mirror index without edge repetition (..., x[2], x[1], x[0], x[1], ...).
int64_t reflect_index(int64_t i, int64_t len) {
    if (len == 1) return 0;
    const int64_t period = 2 * (len - 1);
    i = ((i % period) + period) % period;
    return i < len ? i : period - i;
}

}  // namespace

Spectrogram stft(const Waveform& wave, const StftConfig& cfg) {
    cfg.validate();
    const int64_t len = wave.length();
    if (len < 1) throw std::invalid_argument("stft: empty waveform");
    for (double s : wave.samples)
        if (!std::isfinite(s)) throw std::invalid_argument("stft: non-finite sample");

    const int64_t n = cfg.n_fft;
    const int64_t f_bins = cfg.bins();
    const int64_t t_frames = len / cfg.hop + 1;
    const std::vector<double> w = hann_window(n);

    Spectrogram spec;
    spec.t = t_frames;
    spec.f = f_bins;
    spec.config = cfg;
    spec.original_length = len;
    spec.sample_rate = wave.sample_rate;
    spec.frames.resize(t_frames * f_bins);

    std::vector<std::complex<double>> buf(n);
    for (int64_t t = 0; t < t_frames; ++t) {
        const int64_t start = t * cfg.hop - n / 2;  // in unpadded coordinates
        for (int64_t i = 0; i < n; ++i)
            buf[i] = {wave.samples[reflect_index(start + i, len)] * w[i], 0.0};
        fft::forward(buf);
        for (int64_t k = 0; k < f_bins; ++k) spec.frames[t * f_bins + k] = buf[k];
    }
    return spec;
}

Waveform istft(const Spectrogram& spec) {
    spec.config.validate();
    if (spec.original_length < 0) throw std::invalid_argument("istft: original_length missing");
    const int64_t n = spec.config.n_fft;
    const int64_t hop = spec.config.hop;
    if (spec.f != spec.config.bins())
        throw std::invalid_argument("istft: spectrogram has " + std::to_string(spec.f) + " bins, config wants " +
                                    std::to_string(spec.config.bins()));
    const int64_t padded = (spec.t - 1) * hop + n;
    if (n / 2 + spec.original_length > padded)
        throw std::invalid_argument("istft: frame count does not cover original_length");

    const std::vector<double> w = hann_window(n);
    std::vector<double> acc(padded, 0.0), norm(padded, 0.0);
    std::vector<std::complex<double>> buf(n);
    for (int64_t t = 0; t < spec.t; ++t) {
        const std::complex<double>* row = spec.frames.data() + t * spec.f;
        buf[0] = row[0];
        buf[n / 2] = row[spec.f - 1];
        for (int64_t k = 1; k < n / 2; ++k) {
            buf[k] = row[k];
            buf[n - k] = std::conj(row[k]);
        }
        fft::inverse(buf);
        const int64_t off = t * hop;
        for (int64_t i = 0; i < n; ++i) {
            acc[off + i] += buf[i].real() * w[i];
            norm[off + i] += w[i] * w[i];
        }
    }
    Waveform out;
    out.sample_rate = spec.sample_rate;
    out.samples.resize(spec.original_length);
    const int64_t lead = n / 2;
    for (int64_t i = 0; i < spec.original_length; ++i)
        out.samples[i] = acc[lead + i] / std::max(norm[lead + i], 1e-10);
    return out;
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace {

uint32_t rd_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t rd_u16(const unsigned char* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }

void wr_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}
void wr_u16(std::ofstream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw DataError(path + ": not a RIFF/WAVE file");

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    size_t data_off = 0, data_len = 0;
    size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const uint32_t sz = rd_u32(bytes.data() + pos + 4);
        const size_t body = pos + 8;
        if (body + sz > bytes.size()) throw DataError(path + ": truncated chunk");
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (sz < 16) throw DataError(path + ": short fmt chunk");
            format = rd_u16(bytes.data() + body);
            channels = rd_u16(bytes.data() + body + 2);
            rate = rd_u32(bytes.data() + body + 4);
            bits = rd_u16(bytes.data() + body + 14);
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_off = body;
            data_len = sz;
        }
        pos = body + sz + (sz & 1);
    }
    if (data_off == 0) throw DataError(path + ": no data chunk");
    if (channels != 1) throw DataError(path + ": expected mono, got " + std::to_string(channels) + " channels");

    Waveform wave;
    wave.sample_rate = static_cast<int>(rate);
    if (format == 1 && bits == 16) {
        const size_t count = data_len / 2;
        wave.samples.resize(count);
        for (size_t i = 0; i < count; ++i) {
            int16_t v = static_cast<int16_t>(rd_u16(bytes.data() + data_off + 2 * i));
            wave.samples[i] = static_cast<double>(v) / 32768.0;
        }
    } else if (format == 3 && bits == 32) {
        const size_t count = data_len / 4;
        wave.samples.resize(count);
        for (size_t i = 0; i < count; ++i) {
            uint32_t u = rd_u32(bytes.data() + data_off + 4 * i);
            float fv;
            std::memcpy(&fv, &u, 4);
            wave.samples[i] = fv;
        }
    } else {
        throw DataError(path + ": unsupported format (tag " + std::to_string(format) + ", " +
                        std::to_string(bits) + " bit); PCM16 and float32 are supported");
    }
    return wave;
}

void write_wav(const std::string& path, const Waveform& wave, WavEncoding enc) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    const uint32_t n = static_cast<uint32_t>(wave.samples.size());
    const uint16_t bytes_per = enc == WavEncoding::kFloat32 ? 4 : 2;
    const uint32_t data_len = n * bytes_per;
    os.write("RIFF", 4);
    wr_u32(os, 36 + data_len);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    wr_u32(os, 16);
    wr_u16(os, enc == WavEncoding::kFloat32 ? 3 : 1);
    wr_u16(os, 1);
    wr_u32(os, static_cast<uint32_t>(wave.sample_rate));
    wr_u32(os, static_cast<uint32_t>(wave.sample_rate) * bytes_per);
    wr_u16(os, bytes_per);
    wr_u16(os, bytes_per * 8);
    os.write("data", 4);
    wr_u32(os, data_len);
    if (enc == WavEncoding::kFloat32) {
        for (double s : wave.samples) {
            float fv = static_cast<float>(s);
            uint32_t u;
            std::memcpy(&u, &fv, 4);
            wr_u32(os, u);
        }
    } else {
        for (double s : wave.samples) {
            long v = std::lrint(s * 32768.0);
            v = std::max(-32768L, std::min(32767L, v));
            wr_u16(os, static_cast<uint16_t>(static_cast<int16_t>(v)));
        }
    }
    if (!os) throw IoError("short write to " + path);
}

}  // namespace ftsep
