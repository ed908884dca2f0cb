#ifndef FTSEP_AUDIO_HPP
#define FTSEP_AUDIO_HPP

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "ftsep/common.hpp"

namespace ftsep {

/// Time-domain signal, linear amplitude.
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;

    int64_t length() const { return static_cast<int64_t>(samples.size()); }
    double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct StftConfig {
    int64_t n_fft = 512;
    int64_t hop = 256;
    // window kind: periodic Hann (the only one used here)

    void validate() const;
    int64_t bins() const { return n_fft / 2 + 1; }
};

/// One-sided complex time-frequency grid, T x F row-major.
struct Spectrogram {
    std::vector<std::complex<double>> frames;
    int64_t t = 0;
    int64_t f = 0;
    StftConfig config;
    int64_t original_length = -1;  // -1 = unknown, istft refuses
    int sample_rate = 16000;

    std::complex<double>& at(int64_t ti, int64_t fi) { return frames[ti * f + fi]; }
    const std::complex<double>& at(int64_t ti, int64_t fi) const { return frames[ti * f + fi]; }
};

/// Periodic Hann, w[k] = 0.5 (1 - cos(2 pi k / n)). n >= 2.
std::vector<double> hann_window(int64_t n);

/// Center-padded analysis (reflect padding of n_fft/2 on both ends),
/// T = floor(L / hop) + 1.
Spectrogram stft(const Waveform& wave, const StftConfig& cfg);

/// Weighted overlap-add synthesis with squared-window normalization, trimmed
/// to original_length.
Waveform istft(const Spectrogram& spec);

/// Mono WAV. Reads PCM 16-bit and IEEE float 32-bit.
Waveform read_wav(const std::string& path);

enum class WavEncoding { kFloat32, kPcm16 };

/// Defaults to 32-bit float so separator outputs never clip.
void write_wav(const std::string& path, const Waveform& wave, WavEncoding enc = WavEncoding::kFloat32);

}  // namespace ftsep

#endif  // FTSEP_AUDIO_HPP
