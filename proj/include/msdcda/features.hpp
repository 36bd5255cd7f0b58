#pragma once

#include <complex>
#include <string>
#include <vector>

#include "msdcda/dataio.hpp"
#include "msdcda/matrix.hpp"

namespace msdcda {

struct SignalSegment {
  Matrix samples;  // channels x time
  double sampling_rate_hz = 0.0;
  double duration_s = 0.0;

  std::size_t channels() const { return samples.rows(); }
  std::size_t length() const { return samples.cols(); }
};

struct BandSpec {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// The five EEG bands used throughout: delta, theta, alpha, beta, gamma.
std::vector<BandSpec> default_bands();

// Butterworth band-pass built from the analog prototype via the bilinear
// transform, stored as cascaded biquads. `order` is the number of poles of
// the band-pass transfer function (must be even); the default matches a
// 4-pole response.
class ButterworthBandpass {
 public:
  ButterworthBandpass(double low_hz, double high_hz, double sampling_rate_hz, int order = 4);

  // Single pass over one channel.
  std::vector<double> filter(const std::vector<double>& x) const;
  // Forward-backward pass (zero phase) with odd-reflection edge padding.
  std::vector<double> filter_zero_phase(const std::vector<double>& x) const;

  // Complex response at frequency f; |response|^2 is the zero-phase gain.
  std::complex<double> response(double freq_hz) const;

 private:
  struct Biquad {
    double b0, b1, b2;
    double a1, a2;
  };
  std::vector<Biquad> sections_;
  double gain_ = 1.0;
  double sampling_rate_hz_ = 0.0;
};

std::vector<SignalSegment> segment(const Matrix& signal, double sampling_rate_hz, double window_s);

SignalSegment bandpass(const SignalSegment& segment, const BandSpec& band);

// 0.5 * ln(2*pi*e*var), unbiased variance, floored at 1e-12.
double differential_entropy(const SignalSegment& band_segment, std::size_t channel);

double differential_entropy_of(const std::vector<double>& samples);

// One row per segment, band-major then channel column order.
FeatureMatrix extract_features(const Matrix& signal, double sampling_rate_hz, const std::vector<BandSpec>& bands,
                               double window_s);

// Column z-score; zero-deviation columns map to zero.
FeatureMatrix normalize_electrodewise(const FeatureMatrix& features);

}  // namespace msdcda
