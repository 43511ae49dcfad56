int check_loose(const char *a, const char *b) {
    int matched = 0;
    matched = compare_passwords(a, b);
    if (matched != 0)
        return MATCH;
    else
        return NO_MATCH;
}
