/*
 * gatlas : groupwise generative tissue atlas construction
 *
 * Copyright 2026 The gatlas Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "gatlas/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace gatlas {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

double to_double(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw InvalidInput("config: bad number for " + key + ": '" + v + "'");
    return x;
}

long long to_int(const std::string& key, const std::string& v)
{
    long long x = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InvalidInput("config: bad integer for " + key + ": '" + v + "'");
    return x;
}

bool to_bool(const std::string& key, const std::string& v)
{
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw InvalidInput("config: bad boolean for " + key + ": '" + v + "'");
}

std::string fmt(double x)
{
    std::ostringstream s;
    s.precision(17);
    s << x;
    return s.str();
}

// "1:0,1; 2:2" -> label 1 covers classes {0, 1}, label 2 covers {2}.
LabelMap parse_label_classes(const std::string& v)
{
    LabelMap m;
    for (const std::string& part : split(v, ';')) {
        if (part.empty()) continue;
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw InvalidInput("config: label_classes entries look like 'label:class,class'");
        const long long label = to_int("label_classes", trim(part.substr(0, colon)));
        if (label < 1) throw InvalidInput("config: manual labels start at 1");
        if (m.label_classes.size() < std::size_t(label)) m.label_classes.resize(std::size_t(label));
        for (const std::string& c : split(part.substr(colon + 1), ','))
            m.label_classes[std::size_t(label - 1)].push_back(int(to_int("label_classes", c)));
    }
    return m;
}

}  // namespace

LabelMap ModelConfig::labels() const { return label_map.label_classes.empty() ? LabelMap::identity(classes) : label_map; }

void ModelConfig::set(const std::string& key, const std::string& value)
{
    const std::string& v = value;
    if (key == "classes") classes = int(to_int(key, v));
    else if (key == "label_classes") label_map = parse_label_classes(v);
    else if (key == "lambda_zero") op.lambda_zero = to_double(key, v);
    else if (key == "membrane") op.membrane = to_double(key, v);
    else if (key == "bending") op.bending = to_double(key, v);
    else if (key == "le_mu") op.le_mu = to_double(key, v);
    else if (key == "le_lambda") op.le_lambda = to_double(key, v);
    else if (key == "bias_order") {
        const auto parts = split(v, ',');
        if (parts.size() != 3) throw InvalidInput("config: bias_order takes three integers");
        for (int a = 0; a < 3; ++a) bias_order[std::size_t(a)] = int(to_int(key, parts[std::size_t(a)]));
    } else if (key == "bias_strength") bias_strength = to_double(key, v);
    else if (key == "alpha0") alpha0 = to_double(key, v);
    else if (key == "affine_rotation") affine_rotation = to_double(key, v);
    else if (key == "affine_zoom") affine_zoom = to_double(key, v);
    else if (key == "affine_shear") affine_shear = to_double(key, v);
    else if (key == "zeta") zeta = to_double(key, v);
    else if (key == "max_iterations") max_iterations = int(to_int(key, v));
    else if (key == "tolerance") tolerance = to_double(key, v);
    else if (key == "seed") seed = std::uint64_t(to_int(key, v));
    else if (key == "threads") threads = int(to_int(key, v));
    else if (key == "shoot_steps") shoot_steps = int(to_int(key, v));
    else if (key == "gn_iterations") gn_iterations = int(to_int(key, v));
    else if (key == "template_fwhm") template_fwhm = to_double(key, v);
    else if (key == "velocity_levenberg") velocity_levenberg = to_double(key, v);
    else if (key == "segment_iterations") segment_iterations = int(to_int(key, v));
    else if (key == "update_bias") update_bias = to_bool(key, v);
    else if (key == "update_affine") update_affine = to_bool(key, v);
    else if (key == "update_velocity") update_velocity = to_bool(key, v);
    else if (key == "update_weights") update_weights = to_bool(key, v);
    else if (key == "update_template") update_template = to_bool(key, v);
    else if (key == "update_hyperpriors") update_hyperpriors = to_bool(key, v);
    else if (key == "centroid_init") centroid_init = to_bool(key, v);
    else if (key == "record_time") record_time = to_bool(key, v);
    else throw InvalidInput("config: unknown key '" + key + "'");
}

void ModelConfig::validate() const
{
    if (classes < 2) throw InvalidInput("config: classes must be >= 2");
    labels().validate(classes);
    op.validate();
    for (int o : bias_order)
        if (o < 0) throw InvalidInput("config: bias_order entries must be >= 0");
    if (!(bias_strength >= 0.0)) throw InvalidInput("config: bias_strength must be >= 0");
    if (!(alpha0 >= 1.0)) throw InvalidInput("config: alpha0 must be >= 1");
    if (!(affine_rotation >= 0.0 && affine_zoom >= 0.0 && affine_shear >= 0.0))
        throw InvalidInput("config: affine precisions must be >= 0");
    if (!(zeta > 1.0 / classes - 1e-15 && zeta <= 1.0)) throw InvalidInput("config: zeta must lie in [1/K, 1]");
    if (max_iterations < 1 || gn_iterations < 0 || segment_iterations < 1) throw InvalidInput("config: iteration counts");
    if (!(tolerance >= 0.0)) throw InvalidInput("config: tolerance must be >= 0");
    if (threads < 1) throw InvalidInput("config: threads must be >= 1");
    if (shoot_steps < 1) throw InvalidInput("config: shoot_steps must be >= 1");
    if (!(template_fwhm >= 0.0)) throw InvalidInput("config: template_fwhm must be >= 0");
    if (!(velocity_levenberg > 0.0)) throw InvalidInput("config: velocity_levenberg must be > 0");
}

std::string ModelConfig::to_text() const
{
    std::ostringstream s;
    s << "classes = " << classes << "\n";
    if (!label_map.label_classes.empty()) {
        s << "label_classes = ";
        for (std::size_t l = 0; l < label_map.label_classes.size(); ++l) {
            s << (l ? "; " : "") << l + 1 << ":";
            for (std::size_t c = 0; c < label_map.label_classes[l].size(); ++c)
                s << (c ? "," : "") << label_map.label_classes[l][c];
        }
        s << "\n";
    }
    s << "lambda_zero = " << fmt(op.lambda_zero) << "\nmembrane = " << fmt(op.membrane) << "\nbending = " << fmt(op.bending)
      << "\nle_mu = " << fmt(op.le_mu) << "\nle_lambda = " << fmt(op.le_lambda) << "\nbias_order = " << bias_order[0] << ","
      << bias_order[1] << "," << bias_order[2] << "\nbias_strength = " << fmt(bias_strength) << "\nalpha0 = " << fmt(alpha0)
      << "\naffine_rotation = " << fmt(affine_rotation) << "\naffine_zoom = " << fmt(affine_zoom)
      << "\naffine_shear = " << fmt(affine_shear) << "\nzeta = " << fmt(zeta) << "\nmax_iterations = " << max_iterations
      << "\ntolerance = " << fmt(tolerance) << "\nseed = " << seed << "\nthreads = " << threads
      << "\nshoot_steps = " << shoot_steps << "\ngn_iterations = " << gn_iterations
      << "\ntemplate_fwhm = " << fmt(template_fwhm) << "\nvelocity_levenberg = " << fmt(velocity_levenberg)
      << "\nsegment_iterations = " << segment_iterations << "\nupdate_bias = " << update_bias
      << "\nupdate_affine = " << update_affine << "\nupdate_velocity = " << update_velocity
      << "\nupdate_weights = " << update_weights << "\nupdate_template = " << update_template
      << "\nupdate_hyperpriors = " << update_hyperpriors << "\ncentroid_init = " << centroid_init
      << "\nrecord_time = " << record_time << "\n";
    return s.str();
}

ModelConfig ModelConfig::parse(const std::string& text)
{
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw InvalidInput("config line " + std::to_string(lineno) + ": expected key = value");
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f) throw InvalidInput("cannot open config " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

std::vector<ManifestEntry> parse_manifest(const std::string& text)
{
    std::vector<ManifestEntry> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto fields = split(line, ',');
        if (fields.size() > 3 || fields[0].empty())
            throw InvalidInput("manifest line " + std::to_string(lineno) + ": expected path[,labels[,zeta]]");
        ManifestEntry e;
        e.channels = split(fields[0], ';');
        bool any = false;
        for (const auto& c : e.channels) {
            if (c.empty()) throw InvalidInput("manifest line " + std::to_string(lineno) + ": empty channel path");
            any = any || c != "-";
        }
        if (!any) throw InvalidInput("manifest line " + std::to_string(lineno) + ": every channel is missing");
        if (fields.size() > 1 && fields[1] != "-") e.labels = fields[1];
        if (fields.size() > 2 && !fields[2].empty()) e.zeta = to_double("zeta", fields[2]);
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace gatlas
