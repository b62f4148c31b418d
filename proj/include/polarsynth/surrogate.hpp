#pragma once

#include <algorithm>
#include <atomic>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polarsynth/adam.hpp"
#include "polarsynth/autodiff.hpp"
#include "polarsynth/crc32.hpp"
#include "polarsynth/errors.hpp"
#include "polarsynth/random.hpp"
#include "polarsynth/threading.hpp"

namespace polarsynth::surrogate {

constexpr double kWidthMin = 60e-9;
constexpr double kWidthMax = 300e-9;
constexpr double kCellPitch = 350e-9;
constexpr double kFinHeight = 600e-9;
constexpr double kLambdaMin = 300e-9;
constexpr double kLambdaMax = 750e-9;

struct CellParams {
    double w_x = 0, w_y = 0; // meters

    void validate() const {
        if (w_x < kWidthMin || w_x > kWidthMax || w_y < kWidthMin || w_y > kWidthMax)
            throw DomainError("CellParams: nanofin widths must lie in [60, 300] nm");
    }
};

// Per-polarization amplitude transmittance and phase, phase carried as a
// normalized (cos, sin) pair.
struct OpticalResponse {
    double t_x = 0, t_y = 0;
    double cos_x = 1, sin_x = 0;
    double cos_y = 1, sin_y = 0;

    double phi_x() const { return std::atan2(sin_x, cos_x); }
    double phi_y() const { return std::atan2(sin_y, cos_y); }
    cplx field_x() const { return t_x * cplx(cos_x, sin_x); }
    cplx field_y() const { return t_y * cplx(cos_y, sin_y); }
};

// ------------------------------------------------------------------------
// Synthetic ground-truth generator (field-solver stand-in), version v1.
// Phase: effective-index waveguide model, monotone in the fin width.
// Transmittance: unity minus two Lorentzian resonance dips whose centers
// shift with both widths; the x/y polarizations swap the width roles.
struct SyntheticModelV1 {
    static constexpr const char* version = "synthfdtd-v1";
    double n_lo = 1.2, n_hi = 2.4;
    double xi_a = 0.09, xi_b = 0.62; // smoothstep knots of w/lambda
    struct Dip {
        double base, wa, wb, amplitude, gamma;
    };
    Dip dip1{380e-9, 0.8, 0.2, 0.50, 12e-9};
    Dip dip2{300e-9, 0.3, 0.9, 0.35, 9e-9};
    double t_floor = 0.05;
};

inline const SyntheticModelV1& synthetic_model() {
    static SyntheticModelV1 m;
    return m;
}

namespace detail {
inline double smoothstep(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3 - 2 * t);
}
inline double n_eff(double w, double lambda, const SyntheticModelV1& m) {
    double xi = w / lambda;
    return m.n_lo + (m.n_hi - m.n_lo) * smoothstep((xi - m.xi_a) / (m.xi_b - m.xi_a));
}
inline double lorentz(double s) { return 1.0 / (1.0 + s * s); }
inline double transmittance(double wa, double wb, double lambda, const SyntheticModelV1& m) {
    double c1 = m.dip1.base + m.dip1.wa * wa + m.dip1.wb * wb;
    double c2 = m.dip2.base + m.dip2.wa * wa + m.dip2.wb * wb;
    double t = 1.0 - m.dip1.amplitude * lorentz((lambda - c1) / m.dip1.gamma) -
               m.dip2.amplitude * lorentz((lambda - c2) / m.dip2.gamma);
    return std::clamp(t, m.t_floor, 1.0);
}
} // namespace detail

inline OpticalResponse synthetic_fdtd(const CellParams& cell, double lambda) {
    cell.validate();
    if (lambda < kLambdaMin || lambda > kLambdaMax)
        throw DomainError("synthetic_fdtd: wavelength outside [300, 750] nm");
    const auto& m = synthetic_model();
    OpticalResponse r;
    double phix = 2 * M_PI / lambda * detail::n_eff(cell.w_x, lambda, m) * kFinHeight;
    double phiy = 2 * M_PI / lambda * detail::n_eff(cell.w_y, lambda, m) * kFinHeight;
    r.cos_x = std::cos(phix);
    r.sin_x = std::sin(phix);
    r.cos_y = std::cos(phiy);
    r.sin_y = std::sin(phiy);
    r.t_x = detail::transmittance(cell.w_x, cell.w_y, lambda, m);
    r.t_y = detail::transmittance(cell.w_y, cell.w_x, lambda, m);
    return r;
}

// ------------------------------------------------------------------------
// Dataset

struct ResponseSample {
    double w_x = 0, w_y = 0, lambda = 0;
    OpticalResponse response;
};

struct ResponseDataset {
    std::vector<ResponseSample> samples;
    int n_widths = 0, n_lambdas = 0;
    double width_step = 0, lambda_step = 0;
    std::string generator;

    void validate() const {
        std::set<std::tuple<long, long, long>> keys;
        for (const auto& s : samples) {
            if (s.lambda < kLambdaMin || s.lambda > kLambdaMax)
                throw DomainError("ResponseDataset: wavelength outside [300, 750] nm");
            auto key = std::make_tuple(std::lround(s.w_x * 1e12), std::lround(s.w_y * 1e12),
                                       std::lround(s.lambda * 1e12));
            if (!keys.insert(key).second)
                throw DomainError("ResponseDataset: duplicate (w_x, w_y, lambda) key");
        }
    }
};

inline ResponseDataset generate_synthetic_dataset(int n_widths, int n_lambdas, double lambda_lo,
                                                  double lambda_hi) {
    if (n_widths < 2 || n_lambdas < 1) throw ConfigError("synthetic dataset: grid too small");
    ResponseDataset ds;
    ds.n_widths = n_widths;
    ds.n_lambdas = n_lambdas;
    ds.width_step = (kWidthMax - kWidthMin) / (n_widths - 1);
    ds.lambda_step = n_lambdas > 1 ? (lambda_hi - lambda_lo) / (n_lambdas - 1) : 0.0;
    ds.generator = SyntheticModelV1::version;
    for (int li = 0; li < n_lambdas; ++li) {
        double lambda = n_lambdas > 1 ? lambda_lo + li * ds.lambda_step : lambda_lo;
        for (int yi = 0; yi < n_widths; ++yi)
            for (int xi = 0; xi < n_widths; ++xi) {
                ResponseSample s;
                s.w_x = kWidthMin + xi * ds.width_step;
                s.w_y = kWidthMin + yi * ds.width_step;
                s.lambda = lambda;
                s.response = synthetic_fdtd({s.w_x, s.w_y}, lambda);
                ds.samples.push_back(s);
            }
    }
    ds.validate();
    return ds;
}

// File format: "PSRD1 <json>\n" + packed little-endian f32 rows of
// (w_x, w_y, lambda, t_x, phi_x, t_y, phi_y).
inline void write_dataset(const std::string& path, const ResponseDataset& ds) {
    nlohmann::json head;
    head["version"] = "PSRD1";
    head["fields"] = {"w_x", "w_y", "lambda", "t_x", "phi_x", "t_y", "phi_y"};
    head["units"] = "m,rad";
    head["n_widths"] = ds.n_widths;
    head["n_lambdas"] = ds.n_lambdas;
    head["width_step"] = ds.width_step;
    head["lambda_step"] = ds.lambda_step;
    head["generator"] = ds.generator;
    head["count"] = ds.samples.size();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_dataset: cannot open " + path);
    f << "PSRD1 " << head.dump() << "\n";
    std::vector<float> row(7);
    for (const auto& s : ds.samples) {
        row[0] = static_cast<float>(s.w_x);
        row[1] = static_cast<float>(s.w_y);
        row[2] = static_cast<float>(s.lambda);
        row[3] = static_cast<float>(s.response.t_x);
        row[4] = static_cast<float>(s.response.phi_x());
        row[5] = static_cast<float>(s.response.t_y);
        row[6] = static_cast<float>(s.response.phi_y());
        f.write(reinterpret_cast<const char*>(row.data()), 7 * sizeof(float));
    }
    if (!f) throw IoError("write_dataset: write failed for " + path);
}

inline ResponseDataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_dataset: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("PSRD1 ", 0) != 0)
        throw IoError("read_dataset: bad header in " + path);
    nlohmann::json head = nlohmann::json::parse(line.substr(6), nullptr, false);
    if (head.is_discarded()) throw IoError("read_dataset: malformed header json in " + path);
    ResponseDataset ds;
    ds.n_widths = head.value("n_widths", 0);
    ds.n_lambdas = head.value("n_lambdas", 0);
    ds.width_step = head.value("width_step", 0.0);
    ds.lambda_step = head.value("lambda_step", 0.0);
    ds.generator = head.value("generator", std::string());
    size_t count = head.value("count", size_t{0});
    ds.samples.resize(count);
    std::vector<float> row(7);
    for (size_t i = 0; i < count; ++i) {
        f.read(reinterpret_cast<char*>(row.data()), 7 * sizeof(float));
        if (f.gcount() != 7 * sizeof(float))
            throw IoError("read_dataset: truncated payload in " + path);
        auto& s = ds.samples[i];
        s.w_x = row[0];
        s.w_y = row[1];
        s.lambda = row[2];
        s.response.t_x = row[3];
        s.response.cos_x = std::cos(row[4]);
        s.response.sin_x = std::sin(row[4]);
        s.response.t_y = row[5];
        s.response.cos_y = std::cos(row[6]);
        s.response.sin_y = std::sin(row[6]);
    }
    ds.validate();
    return ds;
}

// ------------------------------------------------------------------------
// Surrogate MLP: 3 inputs (w_x, w_y, lambda), two ReLU hidden layers, six
// raw heads postprocessed to (t_x, t_y, cos/sin pairs). Min-max input
// normalization; phases predicted as geometric (cos, sin) projections.

struct SurrogateModel {
    int h1 = 512, h2 = 512;
    std::vector<double> w1, b1, w2, b2, w3, b3; // w1:[3*h1] w2:[h1*h2] w3:[h2*6]
    double in_lo[3] = {0, 0, 0}, in_hi[3] = {1, 1, 1};
    std::string version = "psnn-v1";
    double test_mae = -1; // withheld-set complex-field MAE recorded at training

    size_t param_count() const { return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size(); }

    void check_bounds(double wx, double wy, double lambda) const {
        const double tol = 1e-12;
        if (wx < in_lo[0] - tol || wx > in_hi[0] + tol || wy < in_lo[1] - tol ||
            wy > in_hi[1] + tol || lambda < in_lo[2] - tol || lambda > in_hi[2] + tol)
            throw DomainError("SurrogateModel: input outside training min-max bounds");
    }
};

constexpr double kNormEps = 1e-9; // (cos, sin) head normalization floor

namespace detail {

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// Raw MLP forward for one sample; optional activation capture for backprop.
// Row-major weight rows keep the inner loops contiguous.
inline void mlp_raw(const SurrogateModel& m, const double in[3], double out[6],
                    std::vector<double>* z1 = nullptr, std::vector<double>* z2 = nullptr) {
    std::vector<double> a1(m.h1), a2(m.h2);
    double xn[3];
    for (int i = 0; i < 3; ++i)
        xn[i] = (in[i] - m.in_lo[i]) / (m.in_hi[i] - m.in_lo[i]);
    for (int j = 0; j < m.h1; ++j) a1[j] = m.b1[j];
    for (int i = 0; i < 3; ++i) {
        const double* w = &m.w1[static_cast<size_t>(i) * m.h1];
        for (int j = 0; j < m.h1; ++j) a1[j] += xn[i] * w[j];
    }
    if (z1) *z1 = a1;
    for (int j = 0; j < m.h1; ++j) a1[j] = a1[j] > 0 ? a1[j] : 0;

    for (int j = 0; j < m.h2; ++j) a2[j] = m.b2[j];
    for (int i = 0; i < m.h1; ++i) {
        double a = a1[i];
        if (a == 0) continue;
        const double* w = &m.w2[static_cast<size_t>(i) * m.h2];
        for (int j = 0; j < m.h2; ++j) a2[j] += a * w[j];
    }
    if (z2) *z2 = a2;
    for (int j = 0; j < m.h2; ++j) a2[j] = a2[j] > 0 ? a2[j] : 0;

    for (int j = 0; j < 6; ++j) out[j] = m.b3[j];
    for (int i = 0; i < m.h2; ++i) {
        double a = a2[i];
        if (a == 0) continue;
        const double* w = &m.w3[static_cast<size_t>(i) * 6];
        for (int j = 0; j < 6; ++j) out[j] += a * w[j];
    }
}

// Postprocess raw heads: sigmoid transmittances, normalized (cos, sin) pairs.
inline void postprocess(const double raw[6], double out[6]) {
    out[0] = sigmoid(raw[0]);
    out[1] = sigmoid(raw[1]);
    for (int p = 0; p < 2; ++p) {
        double c = raw[2 + 2 * p], s = raw[3 + 2 * p];
        double r = std::sqrt(c * c + s * s + kNormEps);
        out[2 + 2 * p] = c / r;
        out[3 + 2 * p] = s / r;
    }
}

// d(post)/d(raw) applied to a cotangent.
inline void postprocess_backward(const double raw[6], const double post[6], const double g_post[6],
                                 double g_raw[6]) {
    g_raw[0] = g_post[0] * post[0] * (1 - post[0]);
    g_raw[1] = g_post[1] * post[1] * (1 - post[1]);
    for (int p = 0; p < 2; ++p) {
        double c = raw[2 + 2 * p], s = raw[3 + 2 * p];
        double r2 = c * c + s * s + kNormEps;
        double r = std::sqrt(r2);
        double nc = post[2 + 2 * p], ns = post[3 + 2 * p];
        double gc = g_post[2 + 2 * p], gs = g_post[3 + 2 * p];
        // g_raw = (g - n (n . g)) / r
        double ndg = nc * gc + ns * gs;
        g_raw[2 + 2 * p] = (gc - nc * ndg) / r;
        g_raw[3 + 2 * p] = (gs - ns * ndg) / r;
    }
}

// Input-gradient of the raw heads: g_in = W1^T D1 W2^T D2 W3 g_out (with the
// normalization scale folded in).
inline void mlp_input_grad(const SurrogateModel& m, const std::vector<double>& z1,
                           const std::vector<double>& z2, const double g_raw[6], double g_in[3]) {
    std::vector<double> d2(m.h2), d1(m.h1);
    for (int i = 0; i < m.h2; ++i) {
        double acc = 0;
        for (int j = 0; j < 6; ++j) acc += m.w3[i * 6 + j] * g_raw[j];
        d2[i] = z2[i] > 0 ? acc : 0;
    }
    for (int i = 0; i < m.h1; ++i) {
        double acc = 0;
        for (int j = 0; j < m.h2; ++j) acc += m.w2[i * m.h2 + j] * d2[j];
        d1[i] = z1[i] > 0 ? acc : 0;
    }
    for (int i = 0; i < 3; ++i) {
        double acc = 0;
        for (int j = 0; j < m.h1; ++j) acc += m.w1[i * m.h1 + j] * d1[j];
        g_in[i] = acc / (m.in_hi[i] - m.in_lo[i]);
    }
}

} // namespace detail

inline OpticalResponse eval_response(const SurrogateModel& m, const CellParams& cell,
                                     double lambda) {
    cell.validate();
    m.check_bounds(cell.w_x, cell.w_y, lambda);
    double in[3] = {cell.w_x, cell.w_y, lambda};
    double raw[6], post[6];
    detail::mlp_raw(m, in, raw);
    detail::postprocess(raw, post);
    OpticalResponse r;
    r.t_x = post[0];
    r.t_y = post[1];
    r.cos_x = post[2];
    r.sin_x = post[3];
    r.cos_y = post[4];
    r.sin_y = post[5];
    return r;
}

// ------------------------------------------------------------------------
// Reparameterization: scaled logistic bijection from an unconstrained latent
// onto the open width interval.

inline double reparameterize(double latent) {
    // sigmoid saturates to exactly 0/1 in floating point around |x| ~ 37; the
    // clamp keeps the image strictly inside the open width interval
    double s = std::clamp(detail::sigmoid(latent), 1e-12, 1.0 - 1e-12);
    return kWidthMin + (kWidthMax - kWidthMin) * s;
}

inline double reparameterize_inverse(double w) {
    double t = (w - kWidthMin) / (kWidthMax - kWidthMin);
    t = std::clamp(t, 1e-15, 1.0 - 1e-15);
    return std::log(t / (1.0 - t));
}

inline double reparameterize_grad(double latent) {
    double s = detail::sigmoid(latent);
    return (kWidthMax - kWidthMin) * s * (1.0 - s);
}

// ------------------------------------------------------------------------
// Training

struct TrainConfig {
    int h1 = 512, h2 = 512;
    int epochs = 2000;
    int batch = 256;
    double lr = 1e-3;
    double lr_end_frac = 0.01; // exponential decay target: lr * frac at the last epoch
    double weight_decay = 1e-4; // decoupled, applied to weight matrices only
    double test_fraction = 0.1;
    uint64_t seed = 0;
};

struct TrainTraceRow {
    int epoch;
    double train_mse;
    double test_mae;
};

struct TrainReport {
    double final_train_mse = 0;
    double test_mae = 0;
    std::vector<TrainTraceRow> trace;
};

namespace detail {

// Complex-field targets (t cos phi, t sin phi) for both polarizations.
inline void sample_target(const ResponseSample& s, double out[4]) {
    out[0] = s.response.t_x * s.response.cos_x;
    out[1] = s.response.t_x * s.response.sin_x;
    out[2] = s.response.t_y * s.response.cos_y;
    out[3] = s.response.t_y * s.response.sin_y;
}

// Composable prediction and its derivative wrt postprocessed heads: the loss
// compares (t*cos, t*sin) per polarization.
inline void composed_pred(const double post[6], double pred[4]) {
    pred[0] = post[0] * post[2];
    pred[1] = post[0] * post[3];
    pred[2] = post[1] * post[4];
    pred[3] = post[1] * post[5];
}

inline double complex_mae(const SurrogateModel& m, const std::vector<const ResponseSample*>& set) {
    double acc = 0;
    for (const auto* s : set) {
        double in[3] = {s->w_x, s->w_y, s->lambda};
        double raw[6], post[6], pred[4], want[4];
        mlp_raw(m, in, raw);
        postprocess(raw, post);
        composed_pred(post, pred);
        sample_target(*s, want);
        double ex = std::hypot(pred[0] - want[0], pred[1] - want[1]);
        double ey = std::hypot(pred[2] - want[2], pred[3] - want[3]);
        acc += 0.5 * (ex + ey);
    }
    return acc / set.size();
}

} // namespace detail

// Minimizes MSE on (t cos phi, t sin phi) targets with Adam; reports the
// withheld-set mean absolute complex-field error. Deterministic per seed.
inline SurrogateModel train_surrogate(const ResponseDataset& ds, const TrainConfig& cfg,
                                      TrainReport* report = nullptr) {
    ds.validate();
    if (cfg.test_fraction < 0.1 - 1e-12)
        throw ConfigError("train_surrogate: withheld test fraction must be >= 10%");
    if (ds.samples.size() < 10) throw ConfigError("train_surrogate: dataset too small");

    SurrogateModel m;
    m.h1 = cfg.h1;
    m.h2 = cfg.h2;
    for (int i = 0; i < 3; ++i) {
        m.in_lo[i] = std::numeric_limits<double>::infinity();
        m.in_hi[i] = -std::numeric_limits<double>::infinity();
    }
    for (const auto& s : ds.samples) {
        double in[3] = {s.w_x, s.w_y, s.lambda};
        for (int i = 0; i < 3; ++i) {
            m.in_lo[i] = std::min(m.in_lo[i], in[i]);
            m.in_hi[i] = std::max(m.in_hi[i], in[i]);
        }
    }
    for (int i = 0; i < 3; ++i)
        if (!(m.in_hi[i] > m.in_lo[i])) m.in_hi[i] = m.in_lo[i] + 1.0;

    // He initialization
    Rng rng(cfg.seed);
    auto he = [&](std::vector<double>& w, int fan_in, size_t n) {
        w.resize(n);
        double s = std::sqrt(2.0 / fan_in);
        for (auto& v : w) v = rng.normal() * s;
    };
    he(m.w1, 3, static_cast<size_t>(3) * m.h1);
    m.b1.assign(m.h1, 0.0);
    he(m.w2, m.h1, static_cast<size_t>(m.h1) * m.h2);
    m.b2.assign(m.h2, 0.0);
    he(m.w3, m.h2, static_cast<size_t>(m.h2) * 6);
    m.b3.assign(6, 0.0);
    {
        // head-bias init at the dataset mean: logit for transmittances, mean
        // field direction for the (cos, sin) pairs
        double mtx = 0, mty = 0, mcx = 0, msx = 0, mcy = 0, msy = 0;
        for (const auto& s2 : ds.samples) {
            mtx += s2.response.t_x;
            mty += s2.response.t_y;
            mcx += s2.response.cos_x;
            msx += s2.response.sin_x;
            mcy += s2.response.cos_y;
            msy += s2.response.sin_y;
        }
        double n = static_cast<double>(ds.samples.size());
        auto logit = [](double p) {
            p = std::clamp(p, 1e-6, 1.0 - 1e-6);
            return std::log(p / (1.0 - p));
        };
        m.b3[0] = logit(mtx / n);
        m.b3[1] = logit(mty / n);
        m.b3[2] = mcx / n;
        m.b3[3] = msx / n;
        m.b3[4] = mcy / n;
        m.b3[5] = msy / n;
    }

    // split
    std::vector<size_t> order(ds.samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform() * i)]);
    size_t n_test = static_cast<size_t>(ds.samples.size() * cfg.test_fraction);
    n_test = std::max<size_t>(1, n_test);
    std::vector<const ResponseSample*> test_set, train_set;
    for (size_t i = 0; i < order.size(); ++i) {
        if (i < n_test) test_set.push_back(&ds.samples[order[i]]);
        else train_set.push_back(&ds.samples[order[i]]);
    }

    // flat parameter/gradient layout
    std::vector<std::vector<double>*> blocks = {&m.w1, &m.b1, &m.w2, &m.b2, &m.w3, &m.b3};
    size_t total = 0;
    for (auto* b : blocks) total += b->size();
    std::vector<double> params(total), grad(total);
    auto gather = [&] {
        size_t o = 0;
        for (auto* b : blocks)
            for (double v : *b) params[o++] = v;
    };
    auto scatter = [&] {
        size_t o = 0;
        for (auto* b : blocks)
            for (double& v : *b) v = params[o++];
    };
    gather();

    AdamConfig acfg;
    acfg.base_lr = cfg.lr;
    acfg.decay = 1.0; // schedule handled per epoch below
    acfg.decay_every = 1;
    AdamOptimizer adam(total, acfg);
    size_t batches_per_epoch = (train_set.size() + cfg.batch - 1) / cfg.batch;
    double decay_per_step =
        cfg.epochs * batches_per_epoch > 1
            ? std::pow(std::max(cfg.lr_end_frac, 1e-6),
                       1.0 / (static_cast<double>(cfg.epochs) * batches_per_epoch - 1))
            : 1.0;

    const int h1 = m.h1, h2 = m.h2;
    const size_t o_w1 = 0, o_b1 = o_w1 + m.w1.size(), o_w2 = o_b1 + m.b1.size(),
                 o_b2 = o_w2 + m.w2.size(), o_w3 = o_b2 + m.b2.size(), o_b3 = o_w3 + m.w3.size();

    std::vector<size_t> perm(train_set.size());
    std::iota(perm.begin(), perm.end(), 0);

    double train_mse = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1], perm[static_cast<size_t>(rng.uniform() * i)]);
        double epoch_loss = 0;
        size_t epoch_terms = 0;
        for (size_t start = 0; start < perm.size(); start += cfg.batch) {
            size_t stop = std::min(perm.size(), start + cfg.batch);
            std::fill(grad.begin(), grad.end(), 0.0);
            double batch_loss = 0;

            // fixed 32-row chunks accumulated in index order keeps the sum
            // independent of the worker count
            const size_t chunk = 32;
            size_t n_chunks = (stop - start + chunk - 1) / chunk;
            std::vector<std::vector<double>> cgrads(n_chunks);
            std::vector<double> closs(n_chunks, 0.0);
            parallel_for(static_cast<int>(n_chunks), [&](int ci) {
                auto& cg = cgrads[ci];
                cg.assign(total, 0.0);
                std::vector<double> z1(h1), z2(h2), a1(h1), a2(h2), d1(h1), d2(h2);
                for (size_t idx = start + ci * chunk; idx < std::min(stop, start + (ci + 1) * chunk);
                     ++idx) {
                    const auto* s = train_set[perm[idx]];
                    double in[3] = {s->w_x, s->w_y, s->lambda};
                    double xn[3];
                    for (int i = 0; i < 3; ++i)
                        xn[i] = (in[i] - m.in_lo[i]) / (m.in_hi[i] - m.in_lo[i]);
                    double raw[6], post[6], pred[4], want[4];
                    // forward with activations
                    for (int j = 0; j < h1; ++j) z1[j] = m.b1[j];
                    for (int i = 0; i < 3; ++i) {
                        const double* w = &m.w1[static_cast<size_t>(i) * h1];
                        for (int j = 0; j < h1; ++j) z1[j] += xn[i] * w[j];
                    }
                    for (int j = 0; j < h1; ++j) a1[j] = z1[j] > 0 ? z1[j] : 0;
                    for (int j = 0; j < h2; ++j) z2[j] = m.b2[j];
                    for (int i = 0; i < h1; ++i) {
                        double a = a1[i];
                        if (a == 0) continue;
                        const double* w = &m.w2[static_cast<size_t>(i) * h2];
                        for (int j = 0; j < h2; ++j) z2[j] += a * w[j];
                    }
                    for (int j = 0; j < h2; ++j) a2[j] = z2[j] > 0 ? z2[j] : 0;
                    for (int j = 0; j < 6; ++j) raw[j] = m.b3[j];
                    for (int i = 0; i < h2; ++i) {
                        double a = a2[i];
                        if (a == 0) continue;
                        const double* w = &m.w3[static_cast<size_t>(i) * 6];
                        for (int j = 0; j < 6; ++j) raw[j] += a * w[j];
                    }
                    detail::postprocess(raw, post);
                    detail::composed_pred(post, pred);
                    detail::sample_target(*s, want);

                    double g_pred[4];
                    for (int i = 0; i < 4; ++i) {
                        double e = pred[i] - want[i];
                        closs[ci] += e * e;
                        g_pred[i] = 2 * e / 4.0; // mean over the 4 components
                    }
                    // chain to postprocessed heads
                    double g_post[6];
                    g_post[0] = g_pred[0] * post[2] + g_pred[1] * post[3];
                    g_post[1] = g_pred[2] * post[4] + g_pred[3] * post[5];
                    g_post[2] = g_pred[0] * post[0];
                    g_post[3] = g_pred[1] * post[0];
                    g_post[4] = g_pred[2] * post[1];
                    g_post[5] = g_pred[3] * post[1];
                    double g_raw[6];
                    detail::postprocess_backward(raw, post, g_post, g_raw);

                    // backprop layers
                    for (int i = 0; i < h2; ++i) {
                        double acc = 0;
                        for (int j = 0; j < 6; ++j) acc += m.w3[i * 6 + j] * g_raw[j];
                        d2[i] = z2[i] > 0 ? acc : 0;
                    }
                    for (int i = 0; i < h1; ++i) {
                        double acc = 0;
                        const double* w2r = &m.w2[static_cast<size_t>(i) * h2];
                        for (int j = 0; j < h2; ++j) acc += w2r[j] * d2[j];
                        d1[i] = z1[i] > 0 ? acc : 0;
                    }
                    for (int i = 0; i < h2; ++i)
                        for (int j = 0; j < 6; ++j) cg[o_w3 + i * 6 + j] += a2[i] * g_raw[j];
                    for (int j = 0; j < 6; ++j) cg[o_b3 + j] += g_raw[j];
                    for (int i = 0; i < h1; ++i) {
                        double a = a1[i];
                        if (a == 0) continue;
                        double* dst = &cg[o_w2 + static_cast<size_t>(i) * h2];
                        for (int j = 0; j < h2; ++j) dst[j] += a * d2[j];
                    }
                    for (int j = 0; j < h2; ++j) cg[o_b2 + j] += d2[j];
                    for (int i = 0; i < 3; ++i)
                        for (int j = 0; j < h1; ++j) cg[o_w1 + i * h1 + j] += xn[i] * d1[j];
                    for (int j = 0; j < h1; ++j) cg[o_b1 + j] += d1[j];
                }
            });
            size_t rows = stop - start;
            for (size_t ci = 0; ci < n_chunks; ++ci) {
                batch_loss += closs[ci];
                for (size_t i = 0; i < total; ++i) grad[i] += cgrads[ci][i];
            }
            for (auto& g : grad) g /= static_cast<double>(rows);
            batch_loss /= static_cast<double>(4 * rows);
            if (!std::isfinite(batch_loss))
                throw NumericalError("train_surrogate: loss diverged (NaN/inf) at epoch " +
                                     std::to_string(epoch));
            adam.step(params, grad);
            if (cfg.weight_decay > 0) {
                double f = 1.0 - adam.config().base_lr * cfg.weight_decay;
                for (size_t i = o_w1; i < o_b1; ++i) params[i] *= f;
                for (size_t i = o_w2; i < o_b2; ++i) params[i] *= f;
                for (size_t i = o_w3; i < o_b3; ++i) params[i] *= f;
            }
            adam.set_base_lr(adam.config().base_lr * decay_per_step);
            scatter();
            epoch_loss += batch_loss * rows;
            epoch_terms += rows;
        }
        train_mse = epoch_loss / epoch_terms;
        if (report && (epoch % 10 == 0 || epoch == cfg.epochs - 1)) {
            report->trace.push_back({epoch, train_mse, detail::complex_mae(m, test_set)});
        }
    }

    m.test_mae = detail::complex_mae(m, test_set);
    if (report) {
        report->final_train_mse = train_mse;
        report->test_mae = m.test_mae;
    }
    return m;
}

// ------------------------------------------------------------------------
// Checkpoint IO: "PSNN1 <json>\n" + f64 payload (w1 b1 w2 b2 w3 b3).

inline void save_model(const std::string& path, const SurrogateModel& m) {
    nlohmann::json head;
    head["version"] = m.version;
    head["h1"] = m.h1;
    head["h2"] = m.h2;
    head["in_lo"] = {m.in_lo[0], m.in_lo[1], m.in_lo[2]};
    head["in_hi"] = {m.in_hi[0], m.in_hi[1], m.in_hi[2]};
    head["test_mae"] = m.test_mae;
    std::vector<double> payload;
    for (auto* b : {&m.w1, &m.b1, &m.w2, &m.b2, &m.w3, &m.b3})
        payload.insert(payload.end(), b->begin(), b->end());
    head["count"] = payload.size();
    char crcbuf[16];
    std::snprintf(crcbuf, sizeof crcbuf, "%08X",
                  crc32(payload.data(), payload.size() * sizeof(double)));
    head["crc32"] = crcbuf;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_model: cannot open " + path);
    f << "PSNN1 " << head.dump() << "\n";
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!f) throw IoError("save_model: write failed for " + path);
}

inline SurrogateModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_model: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("PSNN1 ", 0) != 0)
        throw IoError("load_model: bad header in " + path);
    nlohmann::json head = nlohmann::json::parse(line.substr(6), nullptr, false);
    if (head.is_discarded()) throw IoError("load_model: malformed header json in " + path);
    SurrogateModel m;
    m.version = head.value("version", std::string("psnn-v1"));
    m.h1 = head.at("h1").get<int>();
    m.h2 = head.at("h2").get<int>();
    for (int i = 0; i < 3; ++i) {
        m.in_lo[i] = head.at("in_lo")[i].get<double>();
        m.in_hi[i] = head.at("in_hi")[i].get<double>();
    }
    m.test_mae = head.value("test_mae", -1.0);
    size_t count = head.at("count").get<size_t>();
    std::vector<double> payload(count);
    f.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
        throw IoError("load_model: truncated payload in " + path);
    if (head.contains("crc32")) {
        uint32_t want = std::stoul(head["crc32"].get<std::string>(), nullptr, 16);
        if (want != crc32(payload.data(), payload.size() * sizeof(double)))
            throw IoError("load_model: checksum mismatch in " + path);
    }
    m.w1.resize(static_cast<size_t>(3) * m.h1);
    m.b1.resize(m.h1);
    m.w2.resize(static_cast<size_t>(m.h1) * m.h2);
    m.b2.resize(m.h2);
    m.w3.resize(static_cast<size_t>(m.h2) * 6);
    m.b3.resize(6);
    size_t o = 0;
    for (auto* b : {&m.w1, &m.b1, &m.w2, &m.b2, &m.w3, &m.b3}) {
        if (o + b->size() > payload.size()) throw IoError("load_model: payload too small");
        std::copy(payload.begin() + o, payload.begin() + o + b->size(), b->begin());
        o += b->size();
    }
    if (o != payload.size()) throw IoError("load_model: payload size mismatch");
    return m;
}

// ------------------------------------------------------------------------
// Tape ops

// Elementwise logistic reparameterization of latent grids onto [60, 300] nm.
inline ad::RT reparameterize_op(ad::Tape& t, ad::RT latent) {
    const RGrid& lv = t.val(latent);
    RGrid v(lv.rows(), lv.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = reparameterize(lv[i]);
    ad::RT out = t.make_r(std::move(v), t.needs_grad(latent));
    if (t.needs_grad(latent)) t.push_node([latent, out](ad::Tape& tp) {
        const RGrid& g = tp.grad(out);
        const RGrid& lv2 = tp.val(latent);
        auto* gl = tp.adj(latent);
        for (size_t i = 0; i < g.size(); ++i) (*gl)[i] += g[i] * reparameterize_grad(lv2[i]);
    });
    return out;
}

struct SurrogateEvalOut {
    ad::RT t_x, t_y, cos_x, sin_x, cos_y, sin_y;
};

// Batched differentiable surrogate evaluation at fixed wavelength; gradients
// flow into the width grids (weights are frozen after training).
inline SurrogateEvalOut surrogate_eval_op(ad::Tape& t, ad::RT widths_x, ad::RT widths_y,
                                          double lambda,
                                          std::shared_ptr<const SurrogateModel> model) {
    const RGrid& wx = t.val(widths_x);
    const RGrid& wy = t.val(widths_y);
    wx.require_same(wy);
    int ny = wx.rows(), nx = wx.cols();
    size_t n = wx.size();

    auto raws = std::make_shared<std::vector<double>>(6 * n);
    RGrid tx(ny, nx), ty(ny, nx), cx(ny, nx), sx(ny, nx), cy(ny, nx), sy(ny, nx);
    model->check_bounds(wx[0], wy[0], lambda);
    std::atomic<bool> oob{false};
    parallel_for(ny, [&](int y) {
        double in[3], raw[6], post[6];
        in[2] = lambda;
        for (int x = 0; x < nx; ++x) {
            size_t i = static_cast<size_t>(y) * nx + x;
            in[0] = wx[i];
            in[1] = wy[i];
            if (in[0] < model->in_lo[0] || in[0] > model->in_hi[0] || in[1] < model->in_lo[1] ||
                in[1] > model->in_hi[1]) {
                oob = true;
                return;
            }
            detail::mlp_raw(*model, in, raw);
            detail::postprocess(raw, post);
            for (int j = 0; j < 6; ++j) (*raws)[6 * i + j] = raw[j];
            tx[i] = post[0];
            ty[i] = post[1];
            cx[i] = post[2];
            sx[i] = post[3];
            cy[i] = post[4];
            sy[i] = post[5];
        }
    });
    if (oob) throw DomainError("surrogate_eval: width outside training bounds");

    bool ng = t.needs_grad(widths_x) || t.needs_grad(widths_y);
    SurrogateEvalOut out;
    out.t_x = t.make_r(std::move(tx), ng);
    out.t_y = t.make_r(std::move(ty), ng);
    out.cos_x = t.make_r(std::move(cx), ng);
    out.sin_x = t.make_r(std::move(sx), ng);
    out.cos_y = t.make_r(std::move(cy), ng);
    out.sin_y = t.make_r(std::move(sy), ng);
    if (ng) {
        auto slots = out;
        t.push_node([widths_x, widths_y, slots, lambda, model, raws, ny, nx](ad::Tape& tp) {
            const RGrid& wx2 = tp.val(widths_x);
            const RGrid& wy2 = tp.val(widths_y);
            auto* gwx = tp.adj(widths_x);
            auto* gwy = tp.adj(widths_y);
            const RGrid* gs[6] = {&tp.grad(slots.t_x),   &tp.grad(slots.t_y),
                                  &tp.grad(slots.cos_x), &tp.grad(slots.sin_x),
                                  &tp.grad(slots.cos_y), &tp.grad(slots.sin_y)};
            const RGrid* ps[6] = {&tp.val(slots.t_x),   &tp.val(slots.t_y),
                                  &tp.val(slots.cos_x), &tp.val(slots.sin_x),
                                  &tp.val(slots.cos_y), &tp.val(slots.sin_y)};
            std::vector<double> gx(static_cast<size_t>(ny) * nx, 0.0),
                gy(static_cast<size_t>(ny) * nx, 0.0);
            parallel_for(ny, [&](int y) {
                std::vector<double> z1(model->h1), z2(model->h2);
                double in[3], raw[6], post[6], g_post[6], g_raw[6], g_in[3], dummy[6];
                in[2] = lambda;
                for (int x = 0; x < nx; ++x) {
                    size_t i = static_cast<size_t>(y) * nx + x;
                    in[0] = wx2[i];
                    in[1] = wy2[i];
                    for (int j = 0; j < 6; ++j) {
                        raw[j] = (*raws)[6 * i + j];
                        post[j] = (*ps[j])[i];
                        g_post[j] = (*gs[j])[i];
                    }
                    // need activations for the input gradient
                    detail::mlp_raw(*model, in, dummy, &z1, &z2);
                    detail::postprocess_backward(raw, post, g_post, g_raw);
                    detail::mlp_input_grad(*model, z1, z2, g_raw, g_in);
                    gx[i] = g_in[0];
                    gy[i] = g_in[1];
                }
            });
            for (size_t i = 0; i < gx.size(); ++i) {
                if (gwx) (*gwx)[i] += gx[i];
                if (gwy) (*gwy)[i] += gy[i];
            }
        });
    }
    return out;
}

} // namespace polarsynth::surrogate
