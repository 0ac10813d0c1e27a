#include "dsp.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <numbers>

#include "tbve/features.hpp"

namespace tbve::dsp {

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

std::vector<Complex> rfft(const std::vector<double>& x, std::size_t nfft) {
    std::vector<double> padded(nfft, 0.0);
    std::copy_n(x.begin(), std::min(x.size(), nfft), padded.begin());
    Eigen::FFT<double> fft;
    std::vector<Complex> out;
    fft.fwd(out, padded);
    return out;
}

std::vector<double> irfft(const std::vector<Complex>& spectrum) {
    Eigen::FFT<double> fft;
    std::vector<Complex> out;
    fft.inv(out, spectrum);
    std::vector<double> re(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) re[i] = out[i].real();
    return re;
}

std::vector<double> hann(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);
    return w;
}

namespace {
double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }
}  // namespace

MelBank mel_bank(std::size_t nfft, int sample_rate) {
    MelBank bank;
    bank.bins = nfft / 2 + 1;
    const double nyquist = sample_rate / 2.0;
    const double mel_hi = hz_to_mel(nyquist);
    std::vector<double> edges(kMelBands + 2);
    for (int i = 0; i < kMelBands + 2; ++i)
        edges[i] = mel_to_hz(mel_hi * i / (kMelBands + 1));
    bank.weights.assign(kMelBands, std::vector<double>(bank.bins, 0.0));
    for (int m = 0; m < kMelBands; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (std::size_t k = 0; k < bank.bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / nfft;
            double w = 0.0;
            if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
            else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
            bank.weights[m][k] = w;
        }
    }
    return bank;
}

std::vector<std::vector<double>> dct_basis() {
    std::vector<std::vector<double>> basis(kMfccDim, std::vector<double>(kMelBands));
    for (std::size_t k = 0; k < kMfccDim; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / kMelBands) : std::sqrt(2.0 / kMelBands);
        for (int m = 0; m < kMelBands; ++m)
            basis[k][m] = scale * std::cos(std::numbers::pi * k * (m + 0.5) / kMelBands);
    }
    return basis;
}

int band_of_bin(std::size_t bin, std::size_t nfft, int sample_rate) {
    const double f = static_cast<double>(bin) * sample_rate / nfft;
    const double nyquist = sample_rate / 2.0;
    if (f <= kBandLowHz) return 0;
    const double pos = std::log(f / kBandLowHz) / std::log(nyquist / kBandLowHz) * kPeriodicityDim;
    return std::clamp(static_cast<int>(pos), 0, static_cast<int>(kPeriodicityDim) - 1);
}

}  // namespace tbve::dsp
