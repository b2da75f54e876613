#pragma once

#include <string>
#include <vector>

namespace hrtse {

// Mono audio in float32, values nominally in [-1, 1].
struct Waveform {
    std::vector<float> samples;
    int sample_rate_hz = 16000;

    int size() const { return int(samples.size()); }
    double duration_s() const {
        return double(samples.size()) / double(sample_rate_hz);
    }
};

// Reads PCM16 or IEEE float32 WAV. Multichannel input is averaged to mono.
Waveform read_wav(const std::string& path);

// bits == 16 writes PCM16 (values clipped to [-1,1]); bits == 32 writes
// IEEE float32 (exact round trip).
void write_wav(const std::string& path, const Waveform& w, int bits = 16);

// Polyphase windowed-sinc resampler for rational rate changes.
Waveform resample(const Waveform& w, int target_hz);

}  // namespace hrtse
