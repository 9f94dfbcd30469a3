#include "tapmerge/tensor_store.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "tapmerge/error.hpp"
#include "tapmerge/util.hpp"

namespace tapmerge {

namespace {

constexpr char kMagic[4] = {'M', 'K', 'T', '1'};
constexpr std::size_t kPreamble = 12;

template <typename Fn>
WeightMap zip_map(const WeightMap& a, const WeightMap& b, Fn fn) {
    validate_compat({&a, &b});
    WeightMap out;
    for (const auto& [name, ta] : a) {
        const Tensor& tb = b.at(name);
        Tensor t = Tensor::zeros(ta.shape);
        for (std::size_t i = 0; i < ta.numel(); ++i) t.data[i] = fn(ta.data[i], tb.data[i]);
        out.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (shape_numel(shape) != data.size())
        throw InvalidArgument("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_string(shape));
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape_) {
    const std::size_t n = shape_numel(shape_);
    return Tensor(std::move(shape_), std::vector<float>(n, 0.0f));
}

std::size_t shape_numel(std::span<const std::int64_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw FormatError("non-positive dimension in shape " + shape_string(shape));
        const auto ud = static_cast<std::size_t>(d);
        if (n > std::numeric_limits<std::size_t>::max() / 4 / ud)
            throw FormatError("shape " + shape_string(shape) + " overflows");
        n *= ud;
    }
    return n;
}

std::string shape_string(std::span<const std::int64_t> shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

SchemaDigest schema_of(const WeightMap& map) {
    SchemaDigest s;
    Fnv1a h;
    for (const auto& [name, t] : map) {
        s.pairs.emplace_back(name, t.shape);
        h.update_u64(name.size());
        h.update(name);
        h.update_u64(t.shape.size());
        for (auto d : t.shape) h.update_u64(static_cast<std::uint64_t>(d));
    }
    s.hash = h.digest();
    return s;
}

void check_weight_map(const WeightMap& map) {
    for (const auto& [name, t] : map) {
        if (name.empty()) throw FormatError("empty parameter name");
        if (shape_numel(t.shape) != t.data.size())
            throw FormatError("tensor '" + name + "' has " + std::to_string(t.data.size()) +
                              " values but shape " + shape_string(t.shape));
        for (std::size_t i = 0; i < t.data.size(); ++i)
            if (!std::isfinite(t.data[i]))
                throw NumericalError("non-finite value in tensor '" + name + "' at index " + std::to_string(i));
    }
}

std::vector<std::uint8_t> encode_checkpoint(const WeightMap& map) {
    check_weight_map(map);
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : map) {
        const std::uint64_t len = 4ULL * t.numel();
        header[name] = {{"shape", t.shape}, {"offset", offset}, {"len_bytes", len}};
        offset += len;
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kPreamble + text.size() + offset);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, t] : map)
        for (float v : t.data) put_f32(out, v);
    return out;
}

WeightMap decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
    if (bytes.size() < kPreamble || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw FormatError(origin + ": missing MKT1 magic");
    const std::uint64_t header_len = get_u64(bytes.data() + 4);
    if (header_len > bytes.size() - kPreamble)
        throw FormatError(origin + ": header length " + std::to_string(header_len) + " exceeds file size");
    const auto payload = bytes.subspan(kPreamble + header_len);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": malformed header: " + e.what());
    }
    if (!header.is_object()) throw FormatError(origin + ": header is not a JSON object");

    WeightMap map;
    for (const auto& [name, entry] : header.items()) {
        if (name.empty()) throw FormatError(origin + ": empty parameter name");
        std::vector<std::int64_t> shape;
        std::uint64_t offset = 0, len = 0;
        try {
            shape = entry.at("shape").get<std::vector<std::int64_t>>();
            offset = entry.at("offset").get<std::uint64_t>();
            len = entry.at("len_bytes").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(origin + ": malformed entry for '" + name + "': " + e.what());
        }
        const std::size_t numel = shape_numel(shape);
        if (len != 4ULL * numel)
            throw FormatError(origin + ": tensor '" + name + "' declares " + std::to_string(len) +
                              " bytes but shape " + shape_string(shape) + " needs " + std::to_string(4 * numel));
        if (offset > payload.size()) throw FormatError(origin + ": offset of tensor '" + name + "' out of range");
        if (len > payload.size() - offset) throw FormatError("truncated tensor '" + name + "'");

        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(numel);
        const std::uint8_t* p = payload.data() + offset;
        for (std::size_t i = 0; i < numel; ++i) {
            t.data[i] = get_f32(p + 4 * i);
            if (!std::isfinite(t.data[i]))
                throw NumericalError(origin + ": non-finite value in tensor '" + name + "' at index " +
                                     std::to_string(i));
        }
        map.emplace(name, std::move(t));
    }
    return map;
}

WeightMap load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

void save_checkpoint(const WeightMap& map, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(map));
}

SchemaDigest validate_compat(std::span<const WeightMap* const> maps) {
    if (maps.empty()) throw InvalidArgument("validate_compat: empty list");
    const WeightMap& ref = *maps.front();
    for (std::size_t k = 1; k < maps.size(); ++k) {
        const WeightMap& other = *maps[k];
        auto ia = ref.begin();
        auto ib = other.begin();
        for (; ia != ref.end() && ib != other.end(); ++ia, ++ib) {
            if (ia->first != ib->first) {
                const std::string& missing = ia->first < ib->first ? ia->first : ib->first;
                throw SchemaMismatch("schema mismatch: parameter '" + missing + "' is present in only one checkpoint");
            }
            if (ia->second.shape != ib->second.shape)
                throw SchemaMismatch("schema mismatch: parameter '" + ia->first + "' has shape " +
                                     shape_string(ia->second.shape) + " vs " + shape_string(ib->second.shape));
        }
        if (ia != ref.end() || ib != other.end()) {
            const std::string& extra = ia != ref.end() ? ia->first : ib->first;
            throw SchemaMismatch("schema mismatch: parameter '" + extra + "' is present in only one checkpoint");
        }
    }
    return schema_of(ref);
}

SchemaDigest validate_compat(std::initializer_list<const WeightMap*> maps) {
    return validate_compat(std::span<const WeightMap* const>(maps.begin(), maps.size()));
}

WeightMap add(const WeightMap& a, const WeightMap& b) {
    return zip_map(a, b, [](float x, float y) { return static_cast<float>(double(x) + double(y)); });
}

WeightMap subtract(const WeightMap& a, const WeightMap& b) {
    return zip_map(a, b, [](float x, float y) { return static_cast<float>(double(x) - double(y)); });
}

WeightMap scale(const WeightMap& m, double factor) {
    WeightMap out = m;
    for (auto& [name, t] : out)
        for (auto& v : t.data) v = static_cast<float>(factor * v);
    return out;
}

WeightMap linear_combination(double a, const WeightMap& x, double b, const WeightMap& y) {
    return zip_map(x, y, [a, b](float u, float v) { return static_cast<float>(a * u + b * v); });
}

WeightMap zeros_like(const WeightMap& m) {
    WeightMap out;
    for (const auto& [name, t] : m) out.emplace(name, Tensor::zeros(t.shape));
    return out;
}

double squared_norm(const WeightMap& m) {
    double s = 0.0;
    for (const auto& [name, t] : m)
        for (float v : t.data) s += double(v) * double(v);
    return s;
}

}  // namespace tapmerge
