#pragma once

#include <filesystem>
#include <vector>

namespace beard {

struct Waveform;

/// Mono 16-bit PCM RIFF/WAVE, little-endian. Samples are scaled to [-1, 1).
Waveform read_wav(const std::filesystem::path& path);

/// Samples are clipped to [-1, 1] and rounded to the nearest 16-bit code.
void write_wav(const std::filesystem::path& path, const Waveform& w);

std::vector<char> encode_wav(const Waveform& w);
Waveform decode_wav(const std::vector<char>& bytes);

}  // namespace beard
