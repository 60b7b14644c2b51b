#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "equitempo/audio/audio.hpp"

namespace equitempo {

namespace {

struct ByteReader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;
  const std::string& file;

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size()) {
      throw AudioError(file + ": truncated WAV (" + what + ")");
    }
  }
  std::uint16_t u16() {
    need(2, "u16");
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + pos, 2);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string tag() {
    need(4, "chunk tag");
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), 4);
    pos += 4;
    return s;
  }
  void skip(std::size_t n, const char* what) {
    need(n, what);
    pos += n;
  }
};

}  // namespace

WavData load_wav(const std::filesystem::path& path) {
  const std::string name = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError(name + ": cannot open file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  ByteReader r{bytes, 0, name};

  if (bytes.size() < 12 || r.tag() != "RIFF") {
    throw AudioError(name + ": not a RIFF/WAVE file");
  }
  r.u32();  // RIFF payload size; chunk walk below validates real bounds
  if (r.tag() != "WAVE") throw AudioError(name + ": not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data_ptr = nullptr;
  std::size_t data_len = 0;

  while (r.pos + 8 <= bytes.size()) {
    const std::string id = r.tag();
    const std::uint32_t size = r.u32();
    r.need(size, ("chunk '" + id + "'").c_str());
    if (id == "fmt ") {
      if (size < 16) throw AudioError(name + ": fmt chunk too small");
      const std::size_t fmt_at = r.pos;
      format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      if (format == 0xFFFE) {  // WAVE_FORMAT_EXTENSIBLE: real format in GUID
        if (size < 40) throw AudioError(name + ": extensible fmt chunk too small");
        r.u16();  // cbSize
        r.u16();  // valid bits
        r.u32();  // channel mask
        format = r.u16();
      }
      r.pos = fmt_at + size;
      have_fmt = true;
    } else if (id == "data") {
      data_ptr = bytes.data() + r.pos;
      data_len = size;
      r.skip(size, "data payload");
    } else {
      r.skip(size, "chunk payload");
    }
    if (r.pos % 2 == 1 && r.pos < bytes.size()) r.pos += 1;  // chunk padding
  }

  if (!have_fmt) throw AudioError(name + ": missing fmt chunk");
  if (!data_ptr) throw AudioError(name + ": missing data chunk");
  if (channels < 1 || channels > 2) {
    throw AudioError(name + ": unsupported channel count " + std::to_string(channels));
  }
  if (rate == 0) throw AudioError(name + ": invalid sample rate 0");

  const bool pcm16 = format == 1 && bits == 16;
  const bool pcm24 = format == 1 && bits == 24;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !pcm24 && !f32) {
    throw AudioError(name + ": unsupported WAV encoding (format tag " +
                     std::to_string(format) + ", " + std::to_string(bits) +
                     " bits); expected 16/24-bit PCM or 32-bit float");
  }

  const std::size_t bytes_per = bits / 8;
  const Index n = static_cast<Index>(data_len / bytes_per);
  WavData wav;
  wav.channels = channels;
  wav.sample_rate = static_cast<int>(rate);
  wav.interleaved.resize(n);
  if (pcm16) {
    for (Index i = 0; i < n; ++i) {
      std::int16_t v;
      std::memcpy(&v, data_ptr + i * 2, 2);
      wav.interleaved[i] = static_cast<float>(v) / 32768.0f;
    }
  } else if (pcm24) {
    for (Index i = 0; i < n; ++i) {
      const unsigned char* p = data_ptr + i * 3;
      std::int32_t v = (p[0] << 8) | (p[1] << 16) |
                       (static_cast<std::int32_t>(p[2]) << 24);
      v >>= 8;  // sign-extended 24-bit value
      wav.interleaved[i] = static_cast<float>(v) / 8388608.0f;
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, data_ptr + i * 4, 4);
      wav.interleaved[i] = v;
    }
  }
  return wav;
}

void save_wav_16bit(const std::filesystem::path& path, const AudioClip& clip) {
  const std::string name = path.string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AudioError(name + ": cannot open file for writing");

  const std::uint32_t n = static_cast<std::uint32_t>(clip.samples.size());
  const std::uint32_t data_bytes = n * 2;
  const std::uint32_t rate = static_cast<std::uint32_t>(clip.sample_rate);

  auto put_u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<char*>(&v), 2); };
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), 4); };

  out.write("RIFF", 4);
  put_u32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(rate);
  put_u32(rate * 2);  // byte rate
  put_u16(2);         // block align
  put_u16(16);        // bits
  out.write("data", 4);
  put_u32(data_bytes);

  std::vector<std::int16_t> buf(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const float x = std::clamp(clip.samples[i], -1.0f, 1.0f);
    buf[i] = static_cast<std::int16_t>(std::lrintf(x * 32767.0f));
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(data_bytes));
  if (!out) throw AudioError(name + ": write failed");
}

AudioClip downmix(const WavData& wav) {
  if (wav.channels < 1) throw AudioError("downmix: zero channels");
  AudioClip clip;
  clip.sample_rate = wav.sample_rate;
  const Index frames = wav.frames();
  if (wav.channels == 1) {
    clip.samples = wav.interleaved;
    return clip;
  }
  clip.samples.resize(frames);
  const float inv = 1.0f / static_cast<float>(wav.channels);
  for (Index i = 0; i < frames; ++i) {
    float acc = 0.0f;
    for (int c = 0; c < wav.channels; ++c) acc += wav.interleaved[i * wav.channels + c];
    clip.samples[i] = acc * inv;
  }
  return clip;
}

AudioClip load_audio(const std::filesystem::path& path) {
  AudioClip clip = downmix(load_wav(path));
  if (clip.samples.size() == 0) throw AudioError(path.string() + ": empty audio");
  if (clip.sample_rate != kSampleRate) {
    const double ratio = static_cast<double>(kSampleRate) / clip.sample_rate;
    clip.samples = resample_sinc(clip.samples, ratio);
    clip.sample_rate = kSampleRate;
  }
  return clip;
}

}  // namespace equitempo
