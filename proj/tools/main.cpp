#include "dynvocab/cli.hpp"

int main(int argc, char** argv) { return dynvocab::run_cli(argc, argv); }
