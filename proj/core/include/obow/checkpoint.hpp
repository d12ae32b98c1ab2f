#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace obow {

// Single-file binary archive of named sections. Doubles are stored raw
// (little endian), so round trips are bit exact. Writes are atomic
// (write-temp-then-rename). A version field guards the schema; a mismatch
// fails loudly with no partial state.
struct ArchiveSection {
    enum class Kind : std::uint8_t { kF64 = 0, kI64 = 1, kText = 2 };
    Kind kind = Kind::kF64;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;
    std::string text;
};

class Archive {
public:
    static constexpr std::uint32_t kVersion = 1;

    void put_f64(const std::string& name, std::vector<double> values);
    void put_i64(const std::string& name, std::vector<std::int64_t> values);
    void put_text(const std::string& name, std::string text);

    bool contains(const std::string& name) const { return sections_.count(name) > 0; }
    const std::vector<double>& f64(const std::string& name) const;
    const std::vector<std::int64_t>& i64(const std::string& name) const;
    const std::string& text(const std::string& name) const;

    void save(const std::string& path) const;
    static Archive load(const std::string& path);

    const std::map<std::string, ArchiveSection>& sections() const { return sections_; }

private:
    const ArchiveSection& section(const std::string& name, ArchiveSection::Kind kind) const;
    std::map<std::string, ArchiveSection> sections_;
};

}  // namespace obow
