#include "obow/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace obow {

namespace {

constexpr char kMagic[8] = {'O', 'B', 'O', 'W', 'C', 'K', 'P', 'T'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated archive");
    return v;
}

}  // namespace

void Archive::put_f64(const std::string& name, std::vector<double> values) {
    ArchiveSection s;
    s.kind = ArchiveSection::Kind::kF64;
    s.f64 = std::move(values);
    sections_[name] = std::move(s);
}

void Archive::put_i64(const std::string& name, std::vector<std::int64_t> values) {
    ArchiveSection s;
    s.kind = ArchiveSection::Kind::kI64;
    s.i64 = std::move(values);
    sections_[name] = std::move(s);
}

void Archive::put_text(const std::string& name, std::string text) {
    ArchiveSection s;
    s.kind = ArchiveSection::Kind::kText;
    s.text = std::move(text);
    sections_[name] = std::move(s);
}

const ArchiveSection& Archive::section(const std::string& name, ArchiveSection::Kind kind) const {
    auto it = sections_.find(name);
    if (it == sections_.end())
        throw std::runtime_error("checkpoint: missing section '" + name + "'");
    if (it->second.kind != kind)
        throw std::runtime_error("checkpoint: section '" + name + "' has unexpected type");
    return it->second;
}

const std::vector<double>& Archive::f64(const std::string& name) const {
    return section(name, ArchiveSection::Kind::kF64).f64;
}
const std::vector<std::int64_t>& Archive::i64(const std::string& name) const {
    return section(name, ArchiveSection::Kind::kI64).i64;
}
const std::string& Archive::text(const std::string& name) const {
    return section(name, ArchiveSection::Kind::kText).text;
}

void Archive::save(const std::string& path) const {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
        os.write(kMagic, sizeof(kMagic));
        write_pod<std::uint32_t>(os, kVersion);
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sections_.size()));
        for (const auto& [name, s] : sections_) {
            write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(s.kind));
            switch (s.kind) {
                case ArchiveSection::Kind::kF64:
                    write_pod<std::uint64_t>(os, s.f64.size());
                    os.write(reinterpret_cast<const char*>(s.f64.data()),
                             static_cast<std::streamsize>(s.f64.size() * sizeof(double)));
                    break;
                case ArchiveSection::Kind::kI64:
                    write_pod<std::uint64_t>(os, s.i64.size());
                    os.write(reinterpret_cast<const char*>(s.i64.data()),
                             static_cast<std::streamsize>(s.i64.size() * sizeof(std::int64_t)));
                    break;
                case ArchiveSection::Kind::kText:
                    write_pod<std::uint64_t>(os, s.text.size());
                    os.write(s.text.data(), static_cast<std::streamsize>(s.text.size()));
                    break;
            }
        }
        if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

Archive Archive::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: " + path + " is not a checkpoint archive");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: schema version " + std::to_string(version) +
                                 " does not match expected " + std::to_string(kVersion));
    const auto count = read_pod<std::uint32_t>(is);
    Archive a;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto kind = static_cast<ArchiveSection::Kind>(read_pod<std::uint8_t>(is));
        const auto n = read_pod<std::uint64_t>(is);
        ArchiveSection s;
        s.kind = kind;
        switch (kind) {
            case ArchiveSection::Kind::kF64:
                s.f64.resize(n);
                is.read(reinterpret_cast<char*>(s.f64.data()),
                        static_cast<std::streamsize>(n * sizeof(double)));
                break;
            case ArchiveSection::Kind::kI64:
                s.i64.resize(n);
                is.read(reinterpret_cast<char*>(s.i64.data()),
                        static_cast<std::streamsize>(n * sizeof(std::int64_t)));
                break;
            case ArchiveSection::Kind::kText:
                s.text.resize(n);
                is.read(s.text.data(), static_cast<std::streamsize>(n));
                break;
            default:
                throw std::runtime_error("checkpoint: unknown section kind in " + path);
        }
        if (!is) throw std::runtime_error("checkpoint: truncated archive " + path);
        a.sections_[name] = std::move(s);
    }
    return a;
}

}  // namespace obow
