#pragma once

#include <optional>
#include <string>

#include "hrtse/wav.hpp"

namespace hrtse {

// Short-time objective intelligibility on 10 kHz resampled signals:
// one-third-octave band envelopes over 30-frame segments, correlation based.
// extended=true switches to the normalized spectrogram-correlation variant.
double stoi(const Waveform& est, const Waveform& ref, bool extended = false);
double estoi(const Waveform& est, const Waveform& ref);

struct TsosConfig {
    double active_floor_db = 40.0;  // frame active if within this of the peak
    double suppress_db = 10.0;      // over-suppressed when est falls this far
    int min_run = 2;                // consecutive frames to flag an utterance
    int frame_samples = 320;
    int hop_samples = 160;
};

// Target over-suppression flag: 1 when the estimate drops >= suppress_db
// below the reference on min_run consecutive target-active frames.
bool tsos_flag(const Waveform& est, const Waveform& ref,
               const TsosConfig& cfg = {});

// Shells out to an external scorer ("cmd ref.wav est.wav", last number on
// stdout wins). Empty command -> nullopt; failures raise IoError.
std::optional<double> pesq_external(const std::string& cmd, const Waveform& ref,
                                    const Waveform& est,
                                    const std::string& tmp_dir);

}  // namespace hrtse
