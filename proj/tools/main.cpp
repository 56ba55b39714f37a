#include "mathena/cli.hpp"

int main(int argc, char** argv) { return mathena::run_cli(argc, argv); }
