// Generic gadget: zero-initialised result of a check, compared with != 0.
int victim_program(char *password) {
    int authentication = 0;
    authentication = authentication_check(password);
    if (authentication != 0)
        return SUCCESS;
    else
        return FAILURE;
}
