#pragma once

namespace echocotr {

/// Entry point behind the echocotr binary; also callable in-process from
/// tests. Exit codes: 0 ok, 2 usage, 3 data/format/io, 4 numeric failure.
int cli_main(int argc, const char* const* argv);

}  // namespace echocotr
