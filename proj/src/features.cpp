#include "msdcda/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "msdcda/errors.hpp"

namespace msdcda {

namespace {

constexpr double kVarianceFloor = 1e-12;

double unbiased_variance(const double* x, std::size_t n) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - mean;
    ss += d * d;
  }
  return ss / static_cast<double>(n - 1);
}

}  // namespace

std::vector<BandSpec> default_bands() {
  return {{"delta", 1.0, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 14.0}, {"beta", 14.0, 31.0}, {"gamma", 31.0, 50.0}};
}

ButterworthBandpass::ButterworthBandpass(double low_hz, double high_hz, double sampling_rate_hz, int order)
    : sampling_rate_hz_(sampling_rate_hz) {
  if (!(low_hz > 0.0) || !(high_hz > low_hz)) throw ConfigError("bandpass: band edges must satisfy 0 < low < high");
  if (!(high_hz < sampling_rate_hz / 2.0))
    throw ConfigError("bandpass: high edge " + std::to_string(high_hz) + " Hz violates Nyquist for fs=" +
                      std::to_string(sampling_rate_hz));
  if (order < 2 || order % 2 != 0) throw ConfigError("bandpass: order must be a positive even pole count");

  using cplx = std::complex<double>;
  const double fs2 = 2.0 * sampling_rate_hz;
  // Prewarped analog edges.
  const double wl = fs2 * std::tan(std::numbers::pi * low_hz / sampling_rate_hz);
  const double wh = fs2 * std::tan(std::numbers::pi * high_hz / sampling_rate_hz);
  const double w0 = std::sqrt(wl * wh);
  const double bw = wh - wl;

  const int n_proto = order / 2;
  std::vector<cplx> analog_poles;
  for (int k = 0; k < n_proto; ++k) {
    const double theta = std::numbers::pi / 2.0 + std::numbers::pi * (2.0 * k + 1.0) / (2.0 * n_proto);
    const cplx p(std::cos(theta), std::sin(theta));
    // Low-pass prototype pole to a band-pass pole pair.
    const cplx pb = p * (bw / 2.0);
    const cplx disc = std::sqrt(pb * pb - cplx(w0 * w0, 0.0));
    analog_poles.push_back(pb + disc);
    analog_poles.push_back(pb - disc);
  }

  // Bilinear transform; each analog pole gives a digital pole, the n zeros at
  // s=0 map to z=+1 and the n at infinity to z=-1.
  std::vector<cplx> digital_poles;
  digital_poles.reserve(analog_poles.size());
  for (const auto& s : analog_poles) digital_poles.push_back((cplx(fs2, 0.0) + s) / (cplx(fs2, 0.0) - s));

  // Group into conjugate pairs; with the +/- sqrt construction pole 2k and
  // 2k+1 of distinct prototype poles are not conjugates, so sort by imaginary
  // part magnitude pairing each pole with its conjugate partner.
  std::vector<cplx> pool = digital_poles;
  sections_.clear();
  while (!pool.empty()) {
    cplx p = pool.back();
    pool.pop_back();
    // find conjugate partner (closest to conj(p))
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const double d = std::abs(pool[i] - std::conj(p));
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    cplx q = pool[best];
    pool.erase(pool.begin() + static_cast<long>(best));
    Biquad s{};
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;  // zeros at +1 and -1
    s.a1 = -(p + q).real();
    s.a2 = (p * q).real();
    sections_.push_back(s);
  }

  // Unit gain at the band centre.
  const double f0 = std::atan(w0 / fs2) * sampling_rate_hz / std::numbers::pi;
  gain_ = 1.0;
  const double mag = std::abs(response(f0));
  if (mag > 0.0) gain_ = 1.0 / mag;
}

std::complex<double> ButterworthBandpass::response(double freq_hz) const {
  using cplx = std::complex<double>;
  const double w = 2.0 * std::numbers::pi * freq_hz / sampling_rate_hz_;
  const cplx z1 = std::exp(cplx(0.0, -w));
  const cplx z2 = z1 * z1;
  cplx h(gain_, 0.0);
  for (const auto& s : sections_) {
    h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  }
  return h;
}

std::vector<double> ButterworthBandpass::filter(const std::vector<double>& x) const {
  std::vector<double> y = x;
  for (const auto& s : sections_) {
    double w1 = 0.0, w2 = 0.0;  // direct form II transposed state
    for (double& v : y) {
      const double in = v;
      const double out = s.b0 * in + w1;
      w1 = s.b1 * in - s.a1 * out + w2;
      w2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  for (double& v : y) v *= gain_;
  return y;
}

std::vector<double> ButterworthBandpass::filter_zero_phase(const std::vector<double>& x) const {
  const std::size_t n = x.size();
  if (n < 2) return x;
  std::size_t pad = 3 * (2 * sections_.size() + 1);
  if (pad >= n) pad = n - 1;

  // Odd reflection about the end points.
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x[0] - x[pad - i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 2 - i]);

  std::vector<double> y = filter(ext);
  std::reverse(y.begin(), y.end());
  y = filter(y);
  std::reverse(y.begin(), y.end());
  return {y.begin() + static_cast<long>(pad), y.begin() + static_cast<long>(pad + n)};
}

std::vector<SignalSegment> segment(const Matrix& signal, double sampling_rate_hz, double window_s) {
  if (signal.rows() == 0 || signal.cols() == 0) throw DataError("segment: empty signal");
  if (!(sampling_rate_hz > 0.0) || !(window_s > 0.0)) throw ConfigError("segment: rate and window must be positive");
  const std::size_t win = static_cast<std::size_t>(std::lround(window_s * sampling_rate_hz));
  if (win < 2) throw ConfigError("segment: window too short");
  if (signal.cols() < win)
    throw DataError("segment: window of " + std::to_string(win) + " samples exceeds signal length " +
                    std::to_string(signal.cols()));

  const std::size_t count = signal.cols() / win;
  std::vector<SignalSegment> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    SignalSegment seg;
    seg.samples = Matrix(signal.rows(), win);
    seg.sampling_rate_hz = sampling_rate_hz;
    seg.duration_s = static_cast<double>(win) / sampling_rate_hz;
    for (std::size_t ch = 0; ch < signal.rows(); ++ch)
      std::copy(signal.row(ch) + s * win, signal.row(ch) + (s + 1) * win, seg.samples.row(ch));
    out.push_back(std::move(seg));
  }
  return out;
}

SignalSegment bandpass(const SignalSegment& seg, const BandSpec& band) {
  ButterworthBandpass filt(band.low_hz, band.high_hz, seg.sampling_rate_hz);
  SignalSegment out;
  out.samples = Matrix(seg.channels(), seg.length());
  out.sampling_rate_hz = seg.sampling_rate_hz;
  out.duration_s = seg.duration_s;
  std::vector<double> row(seg.length());
  for (std::size_t ch = 0; ch < seg.channels(); ++ch) {
    std::copy(seg.samples.row(ch), seg.samples.row(ch) + seg.length(), row.begin());
    const auto filtered = filt.filter_zero_phase(row);
    std::copy(filtered.begin(), filtered.end(), out.samples.row(ch));
  }
  return out;
}

double differential_entropy_of(const std::vector<double>& samples) {
  if (samples.size() < 2) throw DataError("differential_entropy: need at least 2 samples");
  const double var = std::max(unbiased_variance(samples.data(), samples.size()), kVarianceFloor);
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

double differential_entropy(const SignalSegment& band_segment, std::size_t channel) {
  if (channel >= band_segment.channels()) throw DataError("differential_entropy: channel index out of range");
  if (band_segment.length() < 2) throw DataError("differential_entropy: segment too short");
  const double var =
      std::max(unbiased_variance(band_segment.samples.row(channel), band_segment.length()), kVarianceFloor);
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

FeatureMatrix extract_features(const Matrix& signal, double sampling_rate_hz, const std::vector<BandSpec>& bands,
                               double window_s) {
  if (bands.empty()) throw ConfigError("extract_features: no bands given");
  const auto segments = segment(signal, sampling_rate_hz, window_s);
  const std::size_t channels = signal.rows();

  FeatureMatrix fm;
  fm.values = Matrix(segments.size(), channels * bands.size());
  for (std::size_t b = 0; b < bands.size(); ++b) {
    ButterworthBandpass filt(bands[b].low_hz, bands[b].high_hz, sampling_rate_hz);
    std::vector<double> row(segments.front().length());
    for (std::size_t s = 0; s < segments.size(); ++s) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        std::copy(segments[s].samples.row(ch), segments[s].samples.row(ch) + segments[s].length(), row.begin());
        const auto filtered = filt.filter_zero_phase(row);
        fm.values(s, b * channels + ch) = differential_entropy_of(filtered);
      }
    }
  }
  if (!all_finite(fm.values)) throw NumericError("extract_features: non-finite feature value");
  return fm;
}

FeatureMatrix normalize_electrodewise(const FeatureMatrix& features) {
  const std::size_t n = features.rows(), dim = features.feature_dim();
  if (n < 2) throw DataError("normalize_electrodewise: need at least 2 rows");

  FeatureMatrix out = features;
  for (std::size_t c = 0; c < dim; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += features.values(r, c);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double d = features.values(r, c) - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    // constant columns can carry rounding residue from the mean subtraction
    if (sd <= 1e-12 * std::max(1.0, std::fabs(mean))) {
      for (std::size_t r = 0; r < n; ++r) out.values(r, c) = 0.0;
    } else {
      for (std::size_t r = 0; r < n; ++r) out.values(r, c) = (features.values(r, c) - mean) / sd;
    }
  }
  return out;
}

}  // namespace msdcda
