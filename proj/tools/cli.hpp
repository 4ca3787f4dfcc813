#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace facediff::cli {

// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric fault. Failures print one line to `err`:
//   facediff: error kind=<kind> exit=<code>: <message>
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace facediff::cli
