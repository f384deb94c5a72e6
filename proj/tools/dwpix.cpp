#include "cli_app.hpp"

int main(int argc, char** argv) { return dwpix::cli::dispatch(argc, argv); }
