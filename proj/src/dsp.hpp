#pragma once

// Private DSP helpers shared by feature extraction and synthesis.

#include <complex>
#include <vector>

namespace tbve::dsp {

using Complex = std::complex<double>;

inline constexpr int kMelBands = 40;
inline constexpr double kMelFloor = 1e-6;  // log(1 + E / floor) compression
inline constexpr double kF0Min = 50.0;
inline constexpr double kF0Max = 500.0;
inline constexpr double kVoicingThreshold = 0.3;
inline constexpr double kBandLowHz = 100.0;

std::size_t next_pow2(std::size_t n);

// Full complex spectrum of a real signal zero-padded to nfft.
std::vector<Complex> rfft(const std::vector<double>& x, std::size_t nfft);
// Real part of the inverse transform (scaled by 1/n).
std::vector<double> irfft(const std::vector<Complex>& spectrum);

std::vector<double> hann(std::size_t n);  // periodic

// Triangular HTK-mel filterbank, kMelBands rows by nfft/2+1 bins.
struct MelBank {
    std::size_t bins = 0;
    std::vector<std::vector<double>> weights;
};
MelBank mel_bank(std::size_t nfft, int sample_rate);

// Orthonormal DCT-II basis, kMfccDim rows by kMelBands columns.
std::vector<std::vector<double>> dct_basis();

// Band index (0..4) for an FFT bin; bands are log-spaced between
// kBandLowHz and Nyquist, with the lowest band extended down to DC.
int band_of_bin(std::size_t bin, std::size_t nfft, int sample_rate);

}  // namespace tbve::dsp
