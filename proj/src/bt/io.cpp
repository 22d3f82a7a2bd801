#include "bt/io.h"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "bt/errors.h"

namespace bt {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hash_hex(const std::string& s) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(s)));
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    f << content;
    if (!f) throw ConfigError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json read_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("json parse error in " + path + ": " + e.what());
    }
}

std::string measurement_csv(const Measurement& m) {
    std::ostringstream os;
    os << "t,coil,re,im\n";
    for (int i = 0; i < m.nsamples(); ++i)
        for (int j = 0; j < m.ncoils(); ++j)
            os << format_double(m.times[i]) << "," << j << ","
               << format_double(m.y(i, j).real()) << ","
               << format_double(m.y(i, j).imag()) << "\n";
    return os.str();
}

nlohmann::json measurement_sidecar(const Measurement& m) {
    return nlohmann::json{{"kind", m.seq_kind}, {"taup", m.taup},
                          {"tau", m.tau},       {"sigma", m.sigma},
                          {"seed", m.seed},     {"nsamples", m.nsamples()},
                          {"ncoils", m.ncoils()}};
}

std::string trajectory_csv(const std::vector<MagState>& states, const Grid& g) {
    std::ostringstream os;
    os << "t,index,re_mplus,im_mplus,re_mz,im_mz\n";
    for (const auto& st : states)
        for (int i = 0; i < g.size(); ++i)
            os << format_double(st.t) << "," << i << ","
               << format_double(st.Mperp(i).real()) << ","
               << format_double(st.Mperp(i).imag()) << ","
               << format_double(st.mz(i).real()) << ","
               << format_double(st.mz(i).imag()) << "\n";
    return os.str();
}

std::string spectral_csv(const VecXcd& xhat, const Grid& g) {
    if (xhat.size() != g.size())
        throw ConfigError("spectral_csv: size does not match the grid");
    std::ostringstream os;
    os << "m0,m1,m2,re,im\n";
    for (int idx = 0; idx < g.size(); ++idx) {
        auto ijk = g.unravel(idx);
        os << g.freq_index(0, ijk[0]) << "," << g.freq_index(1, ijk[1]) << ","
           << g.freq_index(2, ijk[2]) << "," << format_double(xhat(idx).real())
           << "," << format_double(xhat(idx).imag()) << "\n";
    }
    return os.str();
}

std::string newton_csv(const std::vector<NewtonIterate>& hist) {
    std::ostringstream os;
    os << "n,residual,error_to_truth,step_norm\n";
    for (const auto& h : hist)
        os << h.n << "," << format_double(h.residual) << ","
           << format_double(h.error_to_truth) << ","
           << format_double(h.step_norm) << "\n";
    return os.str();
}

std::string field_csv(const Grid& g, const VecXcd& f) {
    if (f.size() != g.size())
        throw ConfigError("field_csv: size does not match the grid");
    std::ostringstream os;
    os << "index,x,re,im\n";
    for (int i = 0; i < g.size(); ++i)
        os << i << "," << format_double(g.coords(i)[0]) << ","
           << format_double(f(i).real()) << "," << format_double(f(i).imag())
           << "\n";
    return os.str();
}

std::string field_csv(const Grid& g, const VecXd& f) {
    VecXcd fc = f.cast<cd>();
    return field_csv(g, fc);
}

nlohmann::json certificate_json(const SpectralCertificate& c) {
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& v : c.lambda_perp)
        ev.push_back({{"re", v.real()}, {"im", v.imag()}});
    return nlohmann::json{
        {"lambda_perp", ev},
        {"lambda_z", c.lambda_z},
        {"det_values", c.det_values},
        {"sigma_min", c.sigma_min},
        {"conditions",
         {{"spacetime_sep", c.spacetime_sep},
          {"assmperp", c.assmperp},
          {"det_ell", c.det_ell},
          {"muIell", c.muIell}}},
        {"pass", c.pass}};
}

} // namespace bt
