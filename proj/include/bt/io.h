#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "bt/bloch.h"
#include "bt/core.h"
#include "bt/invert.h"
#include "bt/measure.h"
#include "bt/spectral.h"

namespace bt {

// lossless, locale-independent number formatting so identical runs produce
// identical bytes
std::string format_double(double v);

std::uint64_t fnv1a64(const std::string& s);
std::string hash_hex(const std::string& s);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

// CSV builders (RFC-4180 style, header row, \n line endings)
std::string measurement_csv(const Measurement& m);      // t,coil,re,im
nlohmann::json measurement_sidecar(const Measurement& m);
std::string trajectory_csv(const std::vector<MagState>& states, const Grid& g);
std::string spectral_csv(const VecXcd& xhat, const Grid& g); // m0,m1,m2,re,im
std::string newton_csv(const std::vector<NewtonIterate>& hist);
std::string field_csv(const Grid& g, const VecXcd& f); // index,x,re,im
std::string field_csv(const Grid& g, const VecXd& f);

nlohmann::json certificate_json(const SpectralCertificate& c);

} // namespace bt
