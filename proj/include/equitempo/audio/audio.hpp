#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

struct AudioError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kSampleRate = 44100;
// Training excerpt length in samples (13.6 s at 44.1 kHz).
inline constexpr Index kExcerptSamples = 600000;

// Mono waveform. Samples live in [-1, 1] by convention; the loaders produce
// that range and the synthesizer keeps to it.
struct AudioClip {
  ArrayX<float> samples;
  int sample_rate = kSampleRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

// Interleaved multi-channel audio as read from a file, before downmixing.
struct WavData {
  ArrayX<float> interleaved;
  int channels = 1;
  int sample_rate = kSampleRate;

  Index frames() const { return channels ? interleaved.size() / channels : 0; }
};

// Reads a PCM WAV file: 16-bit int, 24-bit int, or 32-bit float samples,
// mono or stereo (plain or WAVE_FORMAT_EXTENSIBLE framing). Anything else is
// rejected with an error naming the file and the offending field.
WavData load_wav(const std::filesystem::path& path);

// Writes a mono clip as 16-bit PCM, clamping to [-1, 1].
void save_wav_16bit(const std::filesystem::path& path, const AudioClip& clip);

// Arithmetic mean across channels. Mono input comes back bit-identical.
AudioClip downmix(const WavData& wav);

// Windowed-sinc sample-rate conversion to a new length/rate ratio. Exposed
// here because both file loading (rate normalization) and time stretching
// are built on it. ratio = output_rate / input_rate in resampling terms;
// output length = round(input_length * ratio).
ArrayX<float> resample_sinc(const ArrayX<float>& input, double ratio);

// Loads a file and normalizes it for the pipeline: downmix to mono and, if
// the file is not already at 44100 Hz, windowed-sinc resample to 44100 Hz.
AudioClip load_audio(const std::filesystem::path& path);

}  // namespace equitempo
